//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by papforge operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("solution length {got} does not match instance dimension {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("bit value {0} is not 0 or 1")]
    InvalidBit(u8),

    #[error("random key {0} outside [0, 1]")]
    KeyOutOfRange(f64),

    #[error("evaluation budget {budget} below one generation ({generation})")]
    BudgetTooSmall { budget: usize, generation: usize },

    #[error("portfolio must have at least one member")]
    EmptyPortfolio,

    #[error("instance {0} is degenerate: sampled objective range is empty")]
    DegenerateInstance(String),

    #[error("performance cache has no entry for config {config} on instance {instance}")]
    MissingCacheEntry { config: String, instance: String },

    #[error("need at least {needed} candidate configurations, got {got}")]
    NotEnoughCandidates { needed: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("forward cache does not match this network or input")]
    StaleCache,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("external evaluator protocol error: {0}")]
    Protocol(String),

    #[error("external evaluator timed out after {0:?}")]
    EvaluatorTimeout(std::time::Duration),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
