//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// File does not start with the expected magic or has a malformed header.
    #[error("format error: {0}")]
    Format(String),

    /// File is shorter than the header-declared payload.
    #[error("length error: expected {expected} bytes of payload, got {actual}")]
    Length { expected: usize, actual: usize },

    /// Inputs violate a documented precondition (shape mismatch, non-finite
    /// values, bad levels, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Not enough samples to run an estimator.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A regression has no unique solution (identical abscissae).
    #[error("rank-deficient fit: {0}")]
    RankDeficient(String),

    /// Input is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A derived noise-model quantity left its valid range.
    #[error("model range error: {0}")]
    ModelRange(String),

    /// Newton iteration failed to reach the tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    /// Singular Jacobian or zero variance where a positive one is required.
    #[error("singular: {0}")]
    Singular(String),

    /// Non-finite loss or gradient during training.
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
