//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CreditError>;

#[derive(Debug, Error)]
pub enum CreditError {
    /// A domain or slot that is not declared in the schema registry.
    #[error("schema error: {0}")]
    Schema(String),

    /// A token sequence that does not parse under the state grammar.
    /// `position` is the first offending token index (sequence length if the
    /// sequence ended prematurely).
    #[error("parse error at position {position}: {reason}")]
    Parse { position: usize, reason: String },

    /// A prefix handed to the grammar mask that the mask itself could not
    /// have produced.
    #[error("mask contract violation at position {position}: {reason}")]
    MaskContract { position: usize, reason: String },

    /// Invalid configuration (loss weights, toy-corpus sizes, model dims, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Corpus files that cannot be read or decoded.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Checkpoint container problems (version, shape, encoding).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged (non-finite loss); the last good checkpoint is kept.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CreditError {
    pub fn config(msg: impl Into<String>) -> Self {
        CreditError::Config(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        CreditError::Schema(msg.into())
    }

    pub fn corpus(msg: impl Into<String>) -> Self {
        CreditError::Corpus(msg.into())
    }
}
