use std::io;

use thiserror::Error;

/// Every failure the crate reports.
#[derive(Debug, Error)]
pub enum CgcvError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("index error: {0}")]
    Index(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("synthetic spec error: {0}")]
    Spec(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = CgcvError> = std::result::Result<T, E>;

impl CgcvError {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        CgcvError::Format { offset, message: message.into() }
    }
}
