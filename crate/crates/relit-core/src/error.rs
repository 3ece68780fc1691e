//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by toolkit operations.
#[derive(Debug, Error)]
pub enum RelitError {
    /// Shapes or lengths of two related inputs disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A linear system has no unique solution.
    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    /// An optimizer produced a non-finite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A file's contents do not match the documented schema.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

impl RelitError {
    /// True for faults in the toolkit's own numerics rather than its inputs.
    ///
    /// Callers mapping errors to process exit codes use this to separate
    /// internal failures (exit 1) from input/validation failures (exit 2).
    pub fn is_internal(&self) -> bool {
        matches!(self, RelitError::NonFinite { .. })
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, RelitError>;
