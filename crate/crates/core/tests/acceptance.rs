//! One line per acceptance criterion. Run with `cargo test --test acceptance`.

#[path = "common/mod.rs"]
mod common;

use std::path::PathBuf;
use std::time::Instant;

use approx::abs_diff_eq;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqtag::autodiff::{finite_diff_check_all, Mode, OptimConfig};
use seqtag::config::TaskKind;
use seqtag::corpus::{read_conll, LabeledSentence};
use seqtag::crf::{brute_force_distribution, log_partition, viterbi_decode, CrfParams};
use seqtag::metrics::evaluate_span_f1;
use seqtag::model::{ModelConfig, Tagger};
use seqtag::morph::{build_suffix_inventory, spelling_vector, NUM_SPELLING};
use seqtag::senses::{stick_breaking_prior, stick_residual};
use seqtag::train::{evaluate, train_tagger, TrainOptions, TrainOutcome};
use seqtag::Tensor;

const CRF_TOL: f64 = 1e-8;
const GRAD_TOL: f64 = 1e-4;
const STICK_TOL: f64 = 1e-12;
const OVERFIT_ACC: f64 = 0.99;
const DRIFT: f64 = 0.01;
const LOSS_BAND: f64 = 0.05;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed += 1;
        }
    }
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/synthetic").join(name)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        word_dim: 16,
        char_emb_dim: 8,
        char_hidden: 8,
        sp_hidden: 8,
        decode_hidden: 16,
        tag_emb_dim: 4,
        ..Default::default()
    }
}

fn build(config: ModelConfig, train: &[LabeledSentence], seed: u64) -> Tagger<f64> {
    let suffixes = config.use_suffix.then(|| suffixes_for(train));
    let senses = config.use_sense.then(|| senses_for(train, config.word_dim));
    Tagger::build(config, train, suffixes, senses, seed).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Sequence score written out directly, independent of the library scorer.
fn oracle_score(e: &Tensor<f64>, trans: &Tensor<f64>, start: &Tensor<f64>, end: &Tensor<f64>, y: &[usize]) -> f64 {
    let c = start.len();
    let mut s = start.data()[y[0]] + end.data()[y[y.len() - 1]];
    for (t, &tag) in y.iter().enumerate() {
        s += e.at(t, tag);
        if t > 0 {
            s += trans.data()[y[t - 1] * c + tag];
        }
    }
    s
}

fn all_sequences(m: usize, c: usize) -> Vec<Vec<usize>> {
    (0..c.pow(m as u32))
        .map(|mut code| {
            let mut y = vec![0; m];
            for slot in y.iter_mut().rev() {
                *slot = code % c;
                code /= c;
            }
            y
        })
        .collect()
}

fn crf_criteria(r: &mut Report) {
    let start_time = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_z, mut worst_norm, mut viterbi_misses) = (0.0f64, 0.0f64, 0);
    for _ in 0..500 {
        let m = rng.gen_range(1..=6);
        let c = rng.gen_range(1..=4);
        let e = random_tensor(&mut rng, &[m, c]);
        let (tr, st, en) = (random_tensor(&mut rng, &[c, c]), random_tensor(&mut rng, &[c]), random_tensor(&mut rng, &[c]));
        let crf = CrfParams::new(tr.clone(), st.clone(), en.clone()).unwrap();
        let scored: Vec<(Vec<usize>, f64)> =
            all_sequences(m, c).into_iter().map(|y| {
                let s = oracle_score(&e, &tr, &st, &en, &y);
                (y, s)
            }).collect();
        let max = scored.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + scored.iter().map(|p| (p.1 - max).exp()).sum::<f64>().ln();
        worst_z = worst_z.max((log_partition(&e, &crf).unwrap() - log_z).abs());
        let best = scored.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        if viterbi_decode(&e, &crf).unwrap().0 != best.0 {
            viterbi_misses += 1;
        }
        let total: f64 = brute_force_distribution(&e, &crf).unwrap().iter().map(|p| p.1).sum();
        worst_norm = worst_norm.max((total - 1.0).abs());
    }
    let secs = start_time.elapsed().as_secs_f64();
    r.check(
        "crf oracle equivalence",
        worst_z <= CRF_TOL && viterbi_misses == 0 && secs < 10.0,
        format!("max |log Z - oracle| = {worst_z:.2e} (tol {CRF_TOL:e}), viterbi mismatches {viterbi_misses}/500, {secs:.2}s (< 10s)"),
    );
    r.check(
        "distribution normalization",
        worst_norm <= CRF_TOL,
        format!("max |sum p(y|x) - 1| = {worst_norm:.2e} over 500 instances (tol {CRF_TOL:e})"),
    );
}

fn gradient_criterion(r: &mut Report) {
    let start = Instant::now();
    let train = three_tag_corpus();
    let mut t = build(all_branches(), &train, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["crf.trans", "crf.start", "crf.end"] {
        let id = t.store.require(name).unwrap();
        t.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let s = &train[0];
    let f = t.features(s).unwrap();
    let gold = t.gold(s).unwrap();
    let model = t.clone();
    let err = finite_diff_check_all(&mut t.store, 1e-6, |store| model.loss_and_grads_in(store, &f, &gold, Mode::Eval, 0))
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    r.check(
        "full-model gradient integrity",
        err < GRAD_TOL && secs < 60.0 && s.len() == 3 && t.num_tags() == 3,
        format!("max relative error {err:.2e} (tol {GRAD_TOL:e}), {} parameters, {secs:.2}s (< 60s)", t.store.num_values()),
    );
}

fn overfit_run(train: &[LabeledSentence], seed: u64, epochs: usize) -> TrainOutcome<f64> {
    // Dropout off: the loss-band check wants the plain training objective.
    let t = build(ModelConfig { dropout: 0.0, ..small_config() }, train, seed);
    let opts = TrainOptions { patience: epochs.max(1), optim: OptimConfig::default(), ..TrainOptions::new(TaskKind::Pos, epochs, seed) };
    train_tagger(t, train, &[], &opts, |_| {}).unwrap()
}

fn training_criteria(r: &mut Report) {
    let train = read_conll(data("suffix_rule.conll"), 0, 1).unwrap();
    let tags: std::collections::BTreeSet<&String> = train.iter().flat_map(|s| &s.tags).collect();

    let start = Instant::now();
    let out = overfit_run(&train, 1, 50);
    let secs = start.elapsed().as_secs_f64();
    let acc = evaluate(&out.tagger, &train, TaskKind::Pos, 1).unwrap().accuracy;
    r.check(
        "overfit synthetic suffix-rule corpus",
        acc >= OVERFIT_ACC && secs < 300.0 && train.len() == 50 && tags.len() == 5,
        format!("train accuracy {acc:.4} (>= {OVERFIT_ACC}) after 50 epochs, {secs:.1}s (< 300s), {} sentences, {} tags", train.len(), tags.len()),
    );

    let drift = out.tagger.fusion_weights().iter().map(|(_, w)| (w - 1.0).abs()).fold(0.0, f64::max);
    let weights: Vec<String> = out.tagger.fusion_weights().iter().map(|(b, w)| format!("{}={w:.4}", b.name())).collect();
    r.check("fusion-weight drift", drift > DRIFT, format!("max |w - 1| = {drift:.4} (> {DRIFT}); {}", weights.join(" ")));

    let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
    let rises: Vec<usize> = (5..losses.len()).filter(|&i| losses[i] > losses[i - 1] * (1.0 + LOSS_BAND)).map(|i| i + 1).collect();
    r.check(
        "loss non-increasing after epoch 5",
        rises.is_empty(),
        format!("epochs rising beyond the {}% band: {rises:?}; loss {:.3} -> {:.3}", LOSS_BAND * 100.0, losses[4], losses[losses.len() - 1]),
    );

    let mut bytes = Vec::new();
    let mut first_losses = Vec::new();
    for _ in 0..2 {
        let o = overfit_run(&train, 9, 3);
        first_losses.push(o.log[0].train_loss);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        o.tagger.save(&path).unwrap();
        let read = |suffix: &str| std::fs::read(dir.path().join(format!("model.ckpt{suffix}"))).unwrap();
        bytes.push((read(""), read(".meta.json"), read(".senses")));
    }
    r.check(
        "same seed, identical epoch-1 loss",
        first_losses[0].to_bits() == first_losses[1].to_bits(),
        format!("{:.17} vs {:.17}", first_losses[0], first_losses[1]),
    );
    r.check(
        "byte-identical checkpoints",
        bytes[0] == bytes[1],
        format!(
            "{} checkpoint, {} metadata and {} inventory bytes, identical: {}",
            bytes[0].0.len(),
            bytes[0].1.len(),
            bytes[0].2.len(),
            bytes[0] == bytes[1]
        ),
    );
}

fn ablation_criterion(r: &mut Report) {
    let train = read_conll(data("polysemy_train.conll"), 0, 1).unwrap();
    let valid = read_conll(data("polysemy_valid.conll"), 0, 1).unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=5 {
        let mut accs = Vec::new();
        for config in [small_config(), ModelConfig { word_dim: 16, decode_hidden: 16, ..ModelConfig::word_only() }] {
            let t = build(config, &train, seed);
            let opts = TrainOptions { patience: 5, ..TrainOptions::new(TaskKind::Pos, 15, seed) };
            let out = train_tagger(t, &train, &valid, &opts, |_| {}).unwrap();
            accs.push(evaluate(&out.tagger, &valid, TaskKind::Pos, 1).unwrap().accuracy);
        }
        if accs[0] >= accs[1] {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {:.3} vs {:.3}", accs[0], accs[1]));
    }
    r.check("ablation: full >= word-only", wins >= 4, format!("{wins}/5 seeds (need 4); {}", rows.join(", ")));
}

fn spelling_criterion(r: &mut Report) {
    // (word, position, sentence length, items expected to be set)
    let table: [(&str, usize, usize, &[usize]); 12] = [
        ("The", 0, 3, &[1, 3, 8, 13]),
        ("bank", 1, 3, &[1, 5, 10]),
        ("USA", 2, 3, &[1, 3, 4, 9]),
        ("2024", 1, 3, &[6, 10, 14]),
        ("A4", 1, 3, &[3, 7, 10]),
        ("bank's", 1, 3, &[2, 10, 11, 12]),
        ("3.14", 2, 3, &[9, 12, 14]),
        ("e-mail", 0, 1, &[2, 8, 12]),
        ("x1y2z", 1, 3, &[7, 10]),
        ("'s", 1, 3, &[2, 10, 12]),
        ("Ünïcode", 1, 3, &[1, 3, 10]),
        ("éte", 1, 3, &[1, 5, 10]),
    ];
    let mut wrong = Vec::new();
    let (mut seen_true, mut seen_false) = ([false; NUM_SPELLING], [false; NUM_SPELLING]);
    for (w, pos, len, expect) in table {
        let v = spelling_vector(w, pos, len);
        if v.set_items() != expect {
            wrong.push(format!("{w}: {:?}", v.set_items()));
        }
        for n in 1..=NUM_SPELLING {
            if v.item(n) {
                seen_true[n - 1] = true;
            } else {
                seen_false[n - 1] = true;
            }
        }
    }
    let exercised = seen_true.iter().zip(&seen_false).filter(|(a, b)| **a && **b).count();
    r.check(
        "spelling rule table",
        wrong.is_empty() && exercised == NUM_SPELLING,
        format!("{} rows, {exercised}/14 predicates seen true and false, mismatches {wrong:?}", table.len()),
    );
}

fn suffix_criterion(r: &mut Report) {
    let list: Vec<String> = ["ing", "ed", "ly", "s", "er", "est", "ness", "ment", "tion", "able", "ful", "less"]
        .map(String::from)
        .to_vec();
    let mut tokens = Vec::new();
    for (w, n) in [
        ("running", 3),
        ("Walking", 1),
        ("walking", 2),
        ("jumped", 5),
        ("quickly", 2),
        ("cats", 4),
        ("teacher", 1),
        ("fastest", 1),
        ("kindness", 2),
        ("hopeless", 1),
        ("ing", 3),
    ] {
        tokens.extend(std::iter::repeat_n(w, n));
    }
    let inv = build_suffix_inventory(tokens.iter().copied(), &list, 3).unwrap();
    // Counted by hand: a suffix only counts as a proper suffix, so the bare token "ing" is ignored.
    let suffixes = ["s", "ing", "ed", "ness", "ly", "less", "est", "er", "able", "ment"];
    let counts = [7, 6, 5, 2, 2, 1, 1, 1, 0, 0];
    let admitted: [&[&str]; 10] = [&["cats"], &["running", "walking"], &["jumped"], &[], &[], &[], &[], &[], &[], &[]];
    let ok = inv.suffixes == suffixes
        && inv.counts == counts
        && inv.admitted.iter().zip(admitted).all(|(a, b)| a.iter().map(String::as_str).eq(b.iter().copied()));
    r.check("suffix inventory counting oracle", ok, format!("suffixes {:?}, counts {:?}", inv.suffixes, inv.counts));
}

fn stick_criterion(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let k = rng.gen_range(1..=10);
        let betas: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = (1..=k).map(|i| stick_breaking_prior(&betas, i).unwrap()).sum::<f64>() + stick_residual(&betas);
        worst = worst.max((total - 1.0).abs());
    }
    r.check(
        "stick-breaking identity",
        abs_diff_eq!(worst, 0.0, epsilon = STICK_TOL),
        format!("max |sum prior + residual - 1| = {worst:.2e} over 10^4 draws (tol {STICK_TOL:e})"),
    );
}

fn span_criterion(r: &mut Report) {
    // (gold, predicted, tp, fp, fn) scored by hand.
    let fixture: [(&str, &str, usize, usize, usize); 20] = [
        ("B-PER I-PER O", "B-PER I-PER O", 1, 0, 0),
        ("B-PER I-PER O", "B-PER O O", 0, 1, 1),
        ("B-LOC O B-ORG", "B-LOC O B-LOC", 1, 1, 1),
        ("O O O", "O O O", 0, 0, 0),
        ("O O O", "B-MISC O O", 0, 1, 0),
        ("B-ORG I-ORG I-ORG", "O O O", 0, 0, 1),
        ("I-PER I-PER O", "B-PER I-PER O", 1, 0, 0),
        ("B-PER B-PER O", "B-PER I-PER O", 0, 1, 2),
        ("B-LOC I-LOC", "B-LOC I-ORG", 0, 2, 1),
        ("O B-MISC I-MISC O", "O I-MISC I-MISC O", 1, 0, 0),
        ("B-PER O B-LOC I-LOC", "B-PER O B-LOC I-LOC", 2, 0, 0),
        ("B-PER O B-LOC I-LOC", "B-PER O B-LOC O", 1, 1, 1),
        ("B-ORG", "B-ORG", 1, 0, 0),
        ("B-ORG", "O", 0, 0, 1),
        ("O", "I-LOC", 0, 1, 0),
        ("B-PER I-PER I-PER I-PER", "B-PER I-PER B-PER I-PER", 0, 2, 1),
        ("B-LOC B-ORG B-PER", "B-LOC B-ORG B-PER", 3, 0, 0),
        ("B-LOC B-ORG B-PER", "B-ORG B-LOC B-PER", 1, 2, 2),
        ("O B-MISC O B-MISC", "O B-MISC I-MISC I-MISC", 0, 1, 2),
        ("B-PER I-PER O B-ORG I-ORG", "B-PER I-PER O B-ORG I-ORG", 2, 0, 0),
    ];
    let split = |s: &str| vec![s.split(' ').map(String::from).collect::<Vec<_>>()];
    let mut bad = Vec::new();
    let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
    for (i, (g, p, tp, fp, fn_)) in fixture.iter().enumerate() {
        let rep = evaluate_span_f1(&split(p), &split(g)).unwrap();
        if (rep.spans.tp, rep.spans.fp, rep.spans.fn_) != (*tp, *fp, *fn_) {
            bad.push(i + 1);
        }
        all_p.extend(split(p));
        all_g.extend(split(g));
    }
    let total = evaluate_span_f1(&all_p, &all_g).unwrap();
    let ok = bad.is_empty() && (total.spans.tp, total.spans.fp, total.spans.fn_) == (14, 13, 13);
    r.check(
        "span F1 hand-scored fixture",
        ok,
        format!(
            "20 sentences, TP/FP/FN = {}/{}/{} (expected 14/13/13), F1 {:.4}, mismatched sentences {bad:?}",
            total.spans.tp, total.spans.fp, total.spans.fn_, total.f1
        ),
    );
}

fn main() {
    // Accept and ignore the libtest flags cargo forwards.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut r = Report { failed: 0 };
    crf_criteria(&mut r);
    gradient_criterion(&mut r);
    spelling_criterion(&mut r);
    suffix_criterion(&mut r);
    stick_criterion(&mut r);
    span_criterion(&mut r);
    training_criteria(&mut r);
    ablation_criterion(&mut r);
    if r.failed > 0 {
        println!("{} criteria failed", r.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
