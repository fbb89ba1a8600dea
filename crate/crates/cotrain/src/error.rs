use thiserror::Error;

/// Errors produced by the training, estimation and evaluation pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no pairs: every class needs at least two members")]
    NoPairs,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
