//! Crate-wide error type.

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or graph shape contract violated.
    #[error("shape error: {0}")]
    Shape(String),

    /// Recorded-graph contract violated (non-scalar loss, bad node id, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// An optimizer step was requested for a parameter whose gradient was
    /// never populated (or was already consumed by a previous step).
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    /// Corpus file could not be loaded or failed validation.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Embedding file could not be loaded or failed validation.
    #[error("embedding error: {0}")]
    Embedding(String),

    /// Episode sampling preconditions unmet.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Checkpoint file invalid, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
