//! Run configuration, read from a TOML file.
//!
//! ```toml
//! task = "ner"          # pos | ner | chunk
//! seed = 7
//! epochs = 50
//! patience = 10
//! output = "model.ckpt"
//!
//! [data]
//! train = "train.conll"
//! valid = "valid.conll" # optional; carved from train when absent
//! test = "test.conll"   # optional
//! token_column = 0
//! tag_column = 3
//!
//! [model]               # see ModelConfig
//! word_dim = 50
//!
//! [optim]               # see OptimConfig
//! learning_rate = 0.015
//!
//! [senses]
//! path = "senses.bin"   # or a [senses.train] table to train in-process
//!
//! [suffixes]
//! list = "suffixes.txt" # optional; the built-in list otherwise
//! threshold = 5
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::morph::DEFAULT_SUFFIX_THRESHOLD;
use crate::senses::SenseConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Pos,
    Ner,
    Chunk,
}

impl TaskKind {
    /// True when the validation metric is span F1 rather than accuracy.
    pub fn uses_spans(self) -> bool {
        !matches!(self, TaskKind::Pos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub token_column: usize,
    #[serde(default = "default_tag_column")]
    pub tag_column: usize,
    /// Pretrained word vectors, `token v1 … v_d` per line.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

fn default_tag_column() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SenseSection {
    pub path: Option<PathBuf>,
    /// Settings for in-process training when no `path` is given.
    pub train: Option<SenseConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuffixSection {
    pub list: Option<PathBuf>,
    pub threshold: usize,
}

impl Default for SuffixSection {
    fn default() -> Self {
        SuffixSection { list: None, threshold: DEFAULT_SUFFIX_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Worker threads for data-parallel gradient computation; 1 is sequential.
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub senses: SenseSection,
    #[serde(default)]
    pub suffixes: SuffixSection,
}

fn default_epochs() -> usize {
    50
}

fn default_patience() -> usize {
    10
}

fn default_precision() -> Precision {
    Precision::F64
}

fn default_threads() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("model.ckpt")
}

impl RunConfig {
    /// Defaults for everything except the task and training data.
    pub fn new(task: TaskKind, train: PathBuf) -> Self {
        RunConfig {
            task,
            seed: 0,
            epochs: default_epochs(),
            patience: default_patience(),
            precision: default_precision(),
            threads: default_threads(),
            output: default_output(),
            data: DataConfig {
                train,
                valid: None,
                test: None,
                token_column: 0,
                tag_column: default_tag_column(),
                embeddings: None,
            },
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            senses: SenseSection::default(),
            suffixes: SuffixSection::default(),
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0);
            Error::Parse { path: origin.to_path_buf(), line, msg: e.message().to_string() }
        })?;
        let base = origin.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        fix(&mut self.data.train);
        for p in [&mut self.data.valid, &mut self.data.test, &mut self.data.embeddings, &mut self.senses.path, &mut self.suffixes.list]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be ≥ 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be ≥ 1".into()));
        }
        if self.suffixes.threshold == 0 {
            return Err(Error::Config("suffix threshold must be ≥ 1".into()));
        }
        if let Some(s) = &self.senses.train {
            s.validate()?;
        }
        Ok(())
    }
}
