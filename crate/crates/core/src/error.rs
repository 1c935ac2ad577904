use thiserror::Error;

/// Errors raised by the oracle-world library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (empty input, all -inf, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller violated a precondition (shape mismatch, frozen model, missing posterior, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A public operation produced a NaN or infinite value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training diverged. Carries the optimizer settings in effect.
    #[error("training diverged at step {step}: loss is not finite (learning rate {learning_rate}, {detail})")]
    Diverged {
        step: usize,
        learning_rate: f64,
        detail: String,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
