//! Error taxonomy shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or vector dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar parameter is out of its legal range.
    #[error("parameter error: {0}")]
    Param(String),

    /// A sequence or cache would exceed its configured capacity.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// An input value (e.g. a token id) is outside the model's domain.
    #[error("input error: {0}")]
    Input(String),

    /// A cross-module contract was violated (level mismatch, cache misalignment).
    #[error("contract error: {0}")]
    Contract(String),

    /// A stateful object was driven through an illegal transition.
    #[error("state error: {0}")]
    State(String),

    /// A configuration is internally inconsistent or unusable.
    #[error("config error: {0}")]
    Config(String),

    /// A sequence could not be scored under the reference generator.
    #[error("scoring error: {0}")]
    Scoring(String),

    /// Training diverged; carries the step and batch for post-mortem.
    #[error("non-finite loss at step {step}, batch {batch_id}")]
    NonFiniteLoss { step: u64, batch_id: u64 },

    /// Checkpoint or dataset bytes do not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
