use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum GsfError {
    /// Operand shapes are incompatible with the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A hyperparameter or architecture setting is invalid.
    #[error("config error: {0}")]
    Config(String),
    /// An API was called in a mode that does not support it.
    #[error("usage error: {0}")]
    Usage(String),
    /// A non-finite value appeared in a computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed file contents.
    #[error("data error: {0}")]
    Data(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, GsfError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(GsfError::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(GsfError::Config(msg.into()))
}
