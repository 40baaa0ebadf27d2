//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DenasError>;

#[derive(Error, Debug)]
pub enum DenasError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward error: {0}")]
    Backward(String),

    #[error("non-determinism detected in finite-difference check: {0}")]
    NonDeterministic(String),

    #[error("missing latency table entry for {0}")]
    MissingLatencyKey(String),

    #[error("timer resolution insufficient: {0}")]
    TimerResolution(String),

    #[error("search diverged: {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DenasError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DenasError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        DenasError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
