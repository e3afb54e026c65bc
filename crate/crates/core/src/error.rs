use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Window/hop combination cannot be inverted by overlap-add.
    #[error("numeric config error: {0}")]
    NumericConfig(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for failures caused by numerics rather than usage or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_))
    }
}
