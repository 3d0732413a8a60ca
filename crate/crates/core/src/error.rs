use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value during {0}")]
    NonFinite(String),

    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed tag {0:?}")]
    MalformedTag(String),

    #[error("{0} out of range")]
    OutOfRange(String),

    #[error("instance too large for enumeration: {0} sequences")]
    TooLarge(f64),

    #[error("loss function is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),

    #[error("sequence must not be empty")]
    Empty,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("resource mismatch: {0}")]
    Mismatch(String),

    #[error("in {branch} branch: {source}")]
    Branch {
        branch: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for problems with user data or resources rather than program misuse.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::MalformedTag(_)
                | Error::Format(_)
                | Error::Mismatch(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Diverged { .. }
        )
    }
}
