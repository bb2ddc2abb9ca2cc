use std::io;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed a value outside an operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An iterative numerical routine failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A checkpoint file is malformed, truncated, or inconsistent.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// Two model configs that must agree (teacher vs. student) do not.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for the CLI: 3 for numerical failures mid-run,
    /// 2 for everything the caller got wrong up front.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::Divergence { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Error {
        Error::Shape(msg.into())
    }
}
