use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A value or argument violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A dataset or model file could not be parsed. Lines are 1-based and
    /// include the header.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Split sizes are infeasible for the dataset.
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),

    /// Embedding dimensions disagree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Task kind does not match the requested operation.
    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    /// A ball localizer found no calibration example inside its radius.
    #[error("empty neighborhood: {0}")]
    EmptyNeighborhood(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
