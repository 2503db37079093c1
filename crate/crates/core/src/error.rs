use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate vector: norm {norm:e} is below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("tape usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    Vocab { id: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("split violation: OOD label {label:?} found in {split} split")]
    SplitViolation { label: String, split: String },

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("schedule error: step {step} exceeds total {total}")]
    Schedule { step: usize, total: usize },

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
    Io,
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Compatibility(_) | Error::Schedule { .. } => ErrorKind::Config,
            Error::Manifest(_)
            | Error::SplitViolation { .. }
            | Error::Parse { .. }
            | Error::Sampling(_)
            | Error::Input(_)
            | Error::Vocab { .. }
            | Error::Length { .. }
            | Error::Json(_)
            | Error::Checkpoint(_) => ErrorKind::Data,
            Error::Divergence { .. } | Error::Numeric(_) => ErrorKind::Divergence,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Internal,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
