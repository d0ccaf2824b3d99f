use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("row {row} of the attention mask has no permitted entry")]
    AllMasked { row: usize },

    #[error("{what} id {id} out of range (size {size})")]
    IdOutOfRange { what: &'static str, id: usize, size: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: ordering violation: {msg}")]
    Ordering { line: usize, msg: String },

    #[error("line {line}: dangling reference: {msg}")]
    Dangling { line: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("corrupt or truncated file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty negative set")]
    EmptyNegatives,

    #[error("empty candidate pool")]
    EmptyPool,

    #[error("unknown user {0}")]
    UnknownUser(String),

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("{0}")]
    Protocol(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
