use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// data/shape problems are exit 2, numeric failures exit 3.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("unknown track {0}")]
    UnknownTrack(u64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training loss became non-finite at step {step}: {detail}")]
    NanLoss { step: usize, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("data format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::ShapeMismatch(msg.into())
    }

    /// True for NaN/Inf-class failures (CLI exit code 3).
    pub fn is_numeric(&self) -> bool {
        matches!(self, CoreError::NanLoss { .. } | CoreError::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
