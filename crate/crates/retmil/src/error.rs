//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type. The CLI maps variants onto exit codes: usage,
/// configuration, input, and format problems exit 2; numeric failures
/// (non-finite values, divergence) exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim { op, detail: detail.into() }
    }

    /// True for errors that indicate a numeric failure rather than bad usage.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric(_))
    }
}
