use std::path::PathBuf;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("latent {index} has an all-zero weight column")]
    DeadLatent { index: usize },

    #[error("divergence undefined at ({row}, {col}): positive data with zero reconstruction")]
    UndefinedDivergence { row: usize, col: usize },

    #[error("memory budget exceeded: need {needed} bytes, budget is {budget} bytes")]
    BudgetExceeded { needed: usize, budget: usize },

    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
