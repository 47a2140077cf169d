use thiserror::Error;

use crate::params::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (`n = 0`, `k = 0`, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(ValidationReport),

    /// The iteration produced a non-finite state.
    #[error("non-finite iterate at iteration {iteration} (last estimate {last_estimate:?})")]
    NonFinite {
        iteration: u64,
        last_estimate: Vec<f64>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("ill-conditioned: {0}")]
    IllConditioned(String),

    #[error("matrix exponential did not converge (residual {residual:e})")]
    ExpmConvergence { residual: f64 },

    #[error("not contracting: spectral abscissa {abscissa} is not below -{margin}")]
    NotContracting { abscissa: f64, margin: f64 },

    /// An operation needs ground truth (theta*, H, mu, Gamma) the family does not provide.
    #[error("family has no ground truth: {0}")]
    NoGroundTruth(&'static str),

    #[error("insufficient samples: {got} < {min}")]
    InsufficientSamples { got: usize, min: usize },

    #[error("configuration error: {0}")]
    Config(String),

    /// The configuration text is malformed or does not match the schema.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
