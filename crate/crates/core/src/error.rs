//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value outside its declared range, an empty input, or an unknown id.
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched vector or matrix dimensions.
    #[error("shape error: expected dim {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// Inconsistent or invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Attempted to mutate a frozen policy.
    #[error("policy is frozen; no gradient update or weight mutation is allowed")]
    FrozenPolicy,

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// A pipeline stage needs an artifact that has not been produced yet.
    #[error("missing artifact for stage `{stage}`: {path}")]
    MissingArtifact { stage: String, path: PathBuf },

    /// The synthesis backend failed.
    #[error("synthesis unavailable: {0}")]
    SynthesisUnavailable(String),

    /// Synthetic world generation could not satisfy the requested margin.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
