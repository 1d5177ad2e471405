use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SdlmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SdlmError {
    /// Invalid or inconsistent configuration (unknown task, bad thresholds, D mismatch).
    #[error("configuration error: {0}")]
    Config(String),

    /// Block placement that cannot be materialized into a layout.
    #[error("layout error: {0}")]
    Layout(String),

    /// A caller broke an operation's shape or ordering contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Decoding would step past the model's position table.
    #[error("sequence of {needed} positions exceeds max_positions {max}")]
    Length { needed: usize, max: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SdlmError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SdlmError::Config(msg.into())
    }

    pub(crate) fn layout(msg: impl Into<String>) -> Self {
        SdlmError::Layout(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SdlmError::Contract(msg.into())
    }
}
