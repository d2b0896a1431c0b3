use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("attention over an empty key sequence")]
    EmptyContext,

    #[error("index {index} out of range (size {size}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("timestep {t} outside [{lo}, {hi}]")]
    Timestep { t: usize, lo: usize, hi: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid image: {0}")]
    Image(String),

    #[error("lora target error: {0}")]
    Target(String),

    #[error("duplicate entry: {0}")]
    Duplicate(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file at byte offset {offset}: {message}")]
    Corruption { offset: u64, message: String },

    #[error("frozen parameter `{0}` changed during fine-tuning")]
    FrozenDrift(String),

    #[error("expected a unit vector, norm is {0}")]
    NotUnit(f64),

    #[error("count mismatch: {0}")]
    Arity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
