use std::io;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("malformed {what}: {msg}")]
    Parse { what: &'static str, msg: String },
    #[error("truncated video: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },
    #[error("external scorer failed: {0}")]
    ExternalScorer(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn parse_err(what: &'static str, msg: impl Into<String>) -> Error {
    Error::Parse {
        what,
        msg: msg.into(),
    }
}
