use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand, ValueEnum};
use seqtag::config::{Precision, RunConfig, TaskKind};
use seqtag::corpus::{parse_conll, read_conll, LabeledSentence};
use seqtag::metrics::{evaluate_accuracy, evaluate_span_f1};
use seqtag::model::{ModelMeta, Tagger};
use seqtag::senses::{train_senses, SenseConfig};
use seqtag::train::{evaluate, run_training, suffix_inventory_for, tag_file, EpochLog};
use seqtag::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "seqtag", version, about = "BLSTM-CRF sequence tagger", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Pos,
    Ner,
    Chunk,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Pos => TaskKind::Pos,
            Task::Ner => TaskKind::Ner,
            Task::Chunk => TaskKind::Chunk,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a tagger from a run configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the thread count from the config.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Append a predicted-tag column to a CoNLL file.
    Tag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Sense inventory to use instead of the one saved with the model.
        #[arg(long)]
        senses: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        token_column: usize,
    },
    /// Score predicted tags against gold tags.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value_t = Task::Pos)]
        task: Task,
        /// Tag column of the prediction file; the last column by default.
        #[arg(long)]
        pred_column: Option<usize>,
        /// Tag column of the gold file; the last column by default.
        #[arg(long)]
        gold_column: Option<usize>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train a multi-sense embedding inventory on the tokens of a CoNLL file.
    Senses {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        token_column: usize,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        max_senses: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the ten-suffix inventory from the tokens of a CoNLL file.
    Suffixes {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Candidate suffixes, one per line; the built-in list by default.
        #[arg(long)]
        list: Option<PathBuf>,
        #[arg(long, default_value_t = seqtag::morph::DEFAULT_SUFFIX_THRESHOLD)]
        threshold: usize,
        #[arg(long, default_value_t = 0)]
        token_column: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                _ => 2,
            })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, threads, quiet } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(t) = threads {
                run.threads = t;
            }
            match run.precision {
                Precision::F64 => train::<f64>(&run, quiet),
                Precision::F32 => train::<f32>(&run, quiet),
            }
        }
        Command::Tag { model, input, output, senses, token_column } => match ModelMeta::read(&model)?.precision {
            4 => tag::<f32>(&model, senses.as_deref(), &input, &output, token_column),
            _ => tag::<f64>(&model, senses.as_deref(), &input, &output, token_column),
        },
        Command::Eval { pred, gold, task, pred_column, gold_column, json } => {
            eval(&pred, &gold, task.into(), pred_column, gold_column, json)
        }
        Command::Senses { input, output, token_column, dim, max_senses, window, epochs, seed } => {
            let d = SenseConfig::default();
            let cfg = SenseConfig {
                dim: dim.unwrap_or(d.dim),
                max_senses: max_senses.unwrap_or(d.max_senses),
                window: window.unwrap_or(d.window),
                epochs: epochs.unwrap_or(d.epochs),
                seed: seed.unwrap_or(d.seed),
                ..d
            };
            let corpus: Vec<Vec<String>> = tokens_of(&input, token_column)?.into_iter().map(|s| s.tokens).collect();
            let (inv, _) = train_senses(&corpus, &cfg)?;
            inv.save(&output)?;
            let multi = (0..inv.len()).filter(|&w| inv.active_senses(w).len() > 1).count();
            println!("{} words, {multi} with more than one sense, written to {}", inv.len(), output.display());
            Ok(())
        }
        Command::Suffixes { input, output, list, threshold, token_column } => {
            let sents = tokens_of(&input, token_column)?;
            let inv = suffix_inventory_for(&sents, list.as_deref(), threshold)?;
            inv.save(&output)?;
            for (s, c) in inv.suffixes.iter().zip(&inv.counts) {
                println!("-{s}\t{c}");
            }
            Ok(())
        }
    }
}

fn print_epoch(e: &EpochLog, task: TaskKind) {
    let valid = match &e.valid {
        Some(r) if task.uses_spans() => format!(" valid acc {:.4} f1 {:.4}", r.accuracy, r.f1),
        Some(r) => format!(" valid acc {:.4}", r.accuracy),
        None => String::new(),
    };
    let fusion: Vec<String> = e.fusion.iter().map(|(b, w)| format!("{}={w:.3}", b.name())).collect();
    println!(
        "epoch {:>3} lr {:.5} loss {:.4}{valid} fusion [{}] {:.1}s",
        e.epoch,
        e.learning_rate,
        e.train_loss,
        fusion.join(" "),
        e.seconds
    );
}

fn train<T: Scalar>(run: &RunConfig, quiet: bool) -> Result<()> {
    let (out, prepared) = run_training::<T>(run, |e| {
        if !quiet {
            print_epoch(e, run.task)
        }
    })?;
    match out.best_epoch {
        Some(b) => println!("best epoch {b}, checkpoint {}", run.output.display()),
        None => println!("no epochs run, checkpoint {}", run.output.display()),
    }
    if !prepared.split.test.is_empty() {
        let r = evaluate(&out.tagger, &prepared.split.test, run.task, run.threads)?;
        if run.task.uses_spans() {
            println!("test accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}", r.accuracy, r.precision, r.recall, r.f1);
        } else {
            println!("test accuracy {:.4}", r.accuracy);
        }
    }
    Ok(())
}

fn tag<T: Scalar>(model: &Path, senses: Option<&Path>, input: &Path, output: &Path, column: usize) -> Result<()> {
    let tagger = Tagger::<T>::load(model, senses)?;
    let n = tag_file(&tagger, input, output, column)?;
    println!("tagged {n} sentences into {}", output.display());
    Ok(())
}

/// Sentences read from a CoNLL file when only the tokens matter.
fn tokens_of(path: &Path, column: usize) -> Result<Vec<LabeledSentence>> {
    read_conll(path, column, column)
}

fn tags_of(path: &Path, column: Option<usize>) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    let column = match column {
        Some(c) => c,
        None => {
            let first = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with("-DOCSTART-"));
            first.map_or(0, |l| l.split_whitespace().count() - 1)
        }
    };
    Ok(parse_conll(&text, 0, column, path)?.into_iter().map(|s| s.tags).collect())
}

fn eval(pred: &Path, gold: &Path, task: TaskKind, pc: Option<usize>, gc: Option<usize>, json: bool) -> Result<()> {
    let (p, g) = (tags_of(pred, pc)?, tags_of(gold, gc)?);
    let report = if task.uses_spans() {
        evaluate_span_f1(&p, &g)?
    } else {
        seqtag::metrics::EvalReport {
            sentences: g.len(),
            tokens: g.iter().map(Vec::len).sum(),
            accuracy: evaluate_accuracy(&p, &g)?,
            ..Default::default()
        }
    };
    if json {
        println!("{}", report.to_json());
        return Ok(());
    }
    println!("accuracy {:.4}", report.accuracy);
    if task.uses_spans() {
        let s = report.spans;
        println!("precision {:.4} recall {:.4} f1 {:.4} (tp {} fp {} fn {})", report.precision, report.recall, report.f1, s.tp, s.fp, s.fn_);
        for (label, c) in &report.per_label {
            println!("  {label}: precision {:.4} recall {:.4} f1 {:.4}", c.precision(), c.recall(), c.f1());
        }
    }
    Ok(())
}
