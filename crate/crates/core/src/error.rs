use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule at level {t}: {reason}")]
    InvalidSchedule { t: usize, reason: String },

    #[error("level {t} out of range 1..={max}")]
    LevelOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameterisation mismatch: {0}")]
    ModeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported data spec: {0}")]
    UnsupportedSpec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
