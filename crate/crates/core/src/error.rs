//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("empty dataset: a fit needs at least one transition")]
    EmptyDataset,

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The discounted world-model operator is not a contraction, so the
    /// closed-form action-value solve is not well posed. Carries the measured
    /// spectral-radius estimate.
    #[error("contraction violated: gamma * rho = {gamma} * {rho} >= 1")]
    ContractionViolation { rho: f64, gamma: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
