//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Shape bookkeeping violation (mismatched operands, bad extents, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// A tensor or op produced NaN/Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid argument outside the shape system (bad class index, bad config value, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Parameter-store misuse: unknown name, duplicate name, or update to a frozen parameter.
    #[error("parameter error: {0}")]
    Param(String),

    /// Training diverged; carries the last step that was still finite.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    /// Checkpoint / dataset-cache decode failure.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
