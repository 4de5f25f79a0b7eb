use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor geometry does not fit the requested operation.
    #[error("sizing error: {0}")]
    Sizing(String),
    /// Caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Dataset content is unusable for the request.
    #[error("data error: {0}")]
    Data(String),
    /// A binary or text file could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn sizing(msg: impl Into<String>) -> Error {
    Error::Sizing(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
