//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RdmmError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("integration blew up at step {step}: {detail}")]
    IntegrationBlowup { step: usize, detail: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RdmmError>;
