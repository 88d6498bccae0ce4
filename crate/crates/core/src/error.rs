use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DisaError>;

#[derive(Debug, Error)]
pub enum DisaError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("label error: {0}")]
    Label(String),
    #[error("gradient error: {0}")]
    Gradient(String),
    #[error("zero-norm embedding row: {0}")]
    ZeroNorm(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("empty branch: {0}")]
    EmptyBranch(String),
    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),
    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Divergence { iteration: usize, checkpoint: Option<PathBuf> },
    #[error("taxonomy error: {0}")]
    Taxonomy(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DisaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DisaError::Io { path: path.into(), source }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> DisaError {
    DisaError::Shape(msg.into())
}
