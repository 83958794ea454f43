//! Crate-wide error type.
//!
//! Dimension mismatches between internal matrices are treated as caller bugs
//! and panic via `assert!`. Failures that depend on runtime data (singular
//! matrices, non-finite inputs, malformed files, bad configs, diverging
//! training runs) are reported through [`Error`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("container format error: {0}")]
    Container(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
