use thiserror::Error;

/// Errors surfaced by schedule construction, denoiser evaluation and the
/// optimization drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("denoiser kind mismatch: {0}")]
    DenoiserKind(String),

    #[error("batch too small: need at least {need} samples, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    /// Non-finite loss or gradient. The context string carries the stage,
    /// iteration and offending values so aborted runs can be diagnosed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
