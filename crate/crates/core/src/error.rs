use std::io;

use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("masking error: {0}")]
    Masking(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("gradient oracle failure: {0}")]
    Oracle(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("scheduler error: {0}")]
    Scheduler(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
