//! Data preparation, the training loop, evaluation and file tagging.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, clip_global_norm, sgd_step, Gradients, Mode, OptimConfig, OptimizerKind};
use crate::config::{RunConfig, TaskKind};
use crate::corpus::{batch_iter, load_pretrained_embeddings, read_conll, to_bio2, DatasetSplit, LabeledSentence};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_accuracy, evaluate_span_f1, EvalReport};
use crate::model::{Branch, Features, Tagger};
use crate::morph::{build_suffix_inventory, default_suffix_list, load_suffix_list, SuffixInventory};
use crate::scalar::Scalar;
use crate::senses::{retag_corpus, train_senses, SenseConfig, SenseInventory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub task: TaskKind,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub threads: usize,
    pub optim: OptimConfig,
}

impl TrainOptions {
    pub fn new(task: TaskKind, epochs: usize, seed: u64) -> Self {
        TrainOptions { task, epochs, patience: 10, seed, threads: 1, optim: OptimConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub valid: Option<EvalReport>,
    pub fusion: Vec<(Branch, f64)>,
    pub seconds: f64,
}

impl EpochLog {
    /// Validation metric used for model selection (higher is better).
    pub fn metric(&self, task: TaskKind) -> f64 {
        match &self.valid {
            Some(r) if task.uses_spans() => r.f1,
            Some(r) => r.accuracy,
            None => -self.train_loss,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters from the best validation epoch (the initialisation when no epoch ran).
    pub tagger: Tagger<T>,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finaliser over the combined coordinates.
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn is_non_finite(e: &Error) -> bool {
    match e {
        Error::NonFinite(_) => true,
        Error::Branch { source, .. } => is_non_finite(source),
        _ => false,
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Predicted tag strings for every sentence.
pub fn predict_all<T: Scalar>(tagger: &Tagger<T>, sentences: &[LabeledSentence], threads: usize) -> Result<Vec<Vec<String>>> {
    if threads <= 1 {
        return sentences.iter().map(|s| tagger.predict(s)).collect();
    }
    pool(threads)?.install(|| sentences.par_iter().map(|s| tagger.predict(s)).collect())
}

/// Accuracy for every task, plus span scores for NER and chunking.
pub fn evaluate<T: Scalar>(tagger: &Tagger<T>, sentences: &[LabeledSentence], task: TaskKind, threads: usize) -> Result<EvalReport> {
    let start = Instant::now();
    let pred = predict_all(tagger, sentences, threads)?;
    let gold: Vec<Vec<String>> = sentences.iter().map(|s| s.tags.clone()).collect();
    let mut report = if task.uses_spans() {
        evaluate_span_f1(&pred, &gold)?
    } else {
        EvalReport {
            sentences: gold.len(),
            tokens: gold.iter().map(Vec::len).sum(),
            accuracy: evaluate_accuracy(&pred, &gold)?,
            ..Default::default()
        }
    };
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mini-batch training with per-batch loss averaging, global-norm clipping,
/// early stopping on the validation metric and best-epoch selection.
///
/// Each sentence's dropout stream is seeded from `(seed, epoch, position)`,
/// and per-sentence gradients are merged in batch order, so the result does
/// not depend on `threads`.
pub fn train_tagger<T: Scalar>(
    mut tagger: Tagger<T>,
    train: &[LabeledSentence],
    valid: &[LabeledSentence],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    opts.optim.validate()?;
    if train.is_empty() {
        return Err(Error::Empty);
    }
    let feats: Vec<Features<T>> = train.iter().map(|s| tagger.features(s)).collect::<Result<_>>()?;
    let golds: Vec<Vec<usize>> = train.iter().map(|s| tagger.gold(s)).collect::<Result<_>>()?;
    let workers = if opts.threads > 1 { Some(pool(opts.threads)?) } else { None };

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<crate::tensor::Tensor<T>>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0;
    let clip = T::lit(opts.optim.clip_norm);

    for epoch in 0..opts.epochs {
        let start = Instant::now();
        let batches = batch_iter(train.len(), opts.optim.batch_size, mix(opts.seed, epoch as u64, 0));
        let mut total_loss = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let one = |&i: &usize| -> Result<(T, Gradients<T>)> {
                let seed = mix(opts.seed, epoch as u64 + 1, i as u64 + 1);
                tagger.loss_and_grads(&feats[i], &golds[i], Mode::Train, seed)
            };
            let results: Vec<Result<(T, Gradients<T>)>> = match &workers {
                Some(p) => p.install(|| batch.par_iter().map(one).collect()),
                None => batch.iter().map(one).collect(),
            };
            let mut merged = Gradients::empty(tagger.store.len());
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = match r {
                    Err(e) if is_non_finite(&e) => return Err(Error::Diverged { epoch: epoch + 1, batch: b + 1, loss: f64::NAN }),
                    other => other?,
                };
                let loss = loss.to_f64().unwrap_or(f64::NAN);
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(Error::Diverged { epoch: epoch + 1, batch: b + 1, loss });
                }
                batch_loss += loss;
                merged.merge(&grads);
            }
            total_loss += batch_loss;
            tagger.store.zero_grads();
            tagger.store.accumulate(&merged);
            tagger.store.scale_grads(T::one() / T::lit(batch.len() as f64));
            clip_global_norm(&mut tagger.store, clip);
            step += 1;
            match opts.optim.kind {
                OptimizerKind::Sgd => sgd_step(&mut tagger.store, &opts.optim, epoch),
                OptimizerKind::Adam => adam_step(&mut tagger.store, &opts.optim, step),
            }
            if !tagger.store.params().iter().all(|p| p.value.all_finite()) {
                return Err(Error::Diverged { epoch: epoch + 1, batch: b + 1, loss: batch_loss });
            }
        }
        let valid_report = if valid.is_empty() {
            None
        } else {
            Some(evaluate(&tagger, valid, opts.task, opts.threads)?)
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            learning_rate: match opts.optim.kind {
                OptimizerKind::Sgd => opts.optim.lr_at(epoch),
                OptimizerKind::Adam => opts.optim.learning_rate,
            },
            train_loss: total_loss / train.len() as f64,
            valid: valid_report,
            fusion: tagger.fusion_weights().into_iter().map(|(b, w)| (b, w.to_f64().unwrap_or(f64::NAN))).collect(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        let metric = entry.metric(opts.task);
        log.push(entry);
        if best.as_ref().is_none_or(|(m, _, _)| metric > *m) {
            let snapshot = tagger.store.params().iter().map(|p| p.value.clone()).collect();
            best = Some((metric, epoch + 1, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, values)) = best {
        for (p, v) in tagger.store.params_mut().iter_mut().zip(values) {
            p.value = v;
        }
    }
    for p in tagger.store.params_mut() {
        p.slots.clear();
        p.grad.fill(T::zero());
    }
    Ok(TrainOutcome { tagger, log, best_epoch, stopped_early })
}

/// Datasets with sense renderings attached, plus the feature inventories.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: DatasetSplit,
    pub suffixes: Option<SuffixInventory>,
    pub senses: Option<SenseInventory>,
}

/// Suffix inventory from the training tokens.
pub fn suffix_inventory_for(train: &[LabeledSentence], list: Option<&Path>, threshold: usize) -> Result<SuffixInventory> {
    let list = match list {
        Some(p) => load_suffix_list(p)?,
        None => default_suffix_list(),
    };
    let toks = train.iter().flat_map(|s| s.tokens.iter().map(String::as_str));
    build_suffix_inventory(toks, &list, threshold)
}

/// Reads the datasets, repairs BIO tags for span tasks and builds (or loads)
/// the suffix and sense inventories the model configuration asks for.
pub fn prepare_data(run: &RunConfig) -> Result<Prepared> {
    let (tc, gc) = (run.data.token_column, run.data.tag_column);
    let read = |p: &Path| read_conll(p, tc, gc);
    let train = read(&run.data.train)?;
    if train.is_empty() {
        return Err(Error::Format(format!("{} holds no sentences", run.data.train.display())));
    }
    let test = match &run.data.test {
        Some(p) => read(p)?,
        None => Vec::new(),
    };
    let mut split = match &run.data.valid {
        Some(p) => DatasetSplit { valid: read(p)?, train, test },
        None => DatasetSplit::carve_validation(train, test, run.seed),
    };
    if run.task.uses_spans() {
        for s in split.train.iter_mut().chain(&mut split.valid).chain(&mut split.test) {
            s.tags = to_bio2(&s.tags)?;
        }
    }
    let suffixes = if run.model.use_suffix {
        Some(suffix_inventory_for(&split.train, run.suffixes.list.as_deref(), run.suffixes.threshold)?)
    } else {
        None
    };
    let senses = if run.model.use_sense {
        let inv = match &run.senses.path {
            Some(p) => SenseInventory::load(p)?,
            None => {
                let cfg = run.senses.train.clone().unwrap_or(SenseConfig {
                    dim: run.model.word_dim,
                    seed: run.seed,
                    ..Default::default()
                });
                let toks: Vec<Vec<String>> = split.train.iter().map(|s| s.tokens.clone()).collect();
                train_senses(&toks, &cfg)?.0
            }
        };
        if inv.dim != run.model.word_dim {
            return Err(Error::Mismatch(format!(
                "sense inventory dimension {} differs from word dimension {}",
                inv.dim, run.model.word_dim
            )));
        }
        for part in [&mut split.train, &mut split.valid, &mut split.test] {
            *part = retag_corpus(part, &inv, inv.window);
        }
        Some(inv)
    } else {
        None
    };
    Ok(Prepared { split, suffixes, senses })
}

/// Full pipeline for one run configuration: prepare, build, train, save the best checkpoint.
pub fn run_training<T: Scalar>(run: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<(TrainOutcome<T>, Prepared)> {
    run.validate()?;
    let prepared = prepare_data(run)?;
    let mut tagger = Tagger::<T>::build(
        run.model.clone(),
        &prepared.split.train,
        prepared.suffixes.clone(),
        prepared.senses.clone(),
        run.seed,
    )?;
    if let (Some(path), true) = (&run.data.embeddings, run.model.use_word_emb) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(run.seed);
        let (table, _) = load_pretrained_embeddings(path, &tagger.vocabs.words, run.model.word_dim, &mut rng)?;
        let id = tagger.store.require("word.emb")?;
        *tagger.store.value_mut(id) = table;
    }
    let opts = TrainOptions {
        task: run.task,
        epochs: run.epochs,
        patience: run.patience,
        seed: run.seed,
        threads: run.threads,
        optim: run.optim.clone(),
    };
    let outcome = train_tagger(tagger, &prepared.split.train, &prepared.split.valid, &opts, on_epoch)?;
    outcome.tagger.save(&run.output)?;
    Ok((outcome, prepared))
}

/// Appends a predicted-tag column to every token line of a CoNLL file.
/// Blank lines and `-DOCSTART-` lines are copied unchanged. Returns the number of sentences tagged.
pub fn tag_file<T: Scalar>(
    tagger: &Tagger<T>,
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    token_column: usize,
) -> Result<usize> {
    let input = input.as_ref();
    let text = std::fs::read_to_string(input)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out: Vec<String> = lines.iter().map(|l| l.trim_end().to_string()).collect();
    let mut block: Vec<usize> = Vec::new();
    let mut count = 0;
    let mut flush = |block: &mut Vec<usize>, out: &mut Vec<String>| -> Result<()> {
        if block.is_empty() {
            return Ok(());
        }
        let tokens: Vec<String> = block
            .iter()
            .map(|&i| {
                lines[i]
                    .split_whitespace()
                    .nth(token_column)
                    .map(String::from)
                    .ok_or_else(|| Error::parse(input, i + 1, format!("no column {token_column}")))
            })
            .collect::<Result<_>>()?;
        let n = tokens.len();
        let sentence = LabeledSentence::new(tokens, vec![String::new(); n])?;
        for (&i, tag) in block.iter().zip(tagger.predict(&sentence)?) {
            out[i] = format!("{} {tag}", out[i]);
        }
        block.clear();
        count += 1;
        Ok(())
    };
    for (i, line) in lines.iter().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with("-DOCSTART-") {
            flush(&mut block, &mut out)?;
        } else {
            block.push(i);
        }
    }
    flush(&mut block, &mut out)?;
    let mut body = out.join("\n");
    if !out.is_empty() {
        body.push('\n');
    }
    std::fs::write(output, body)?;
    Ok(count)
}
