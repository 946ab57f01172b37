use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point behind camera (depth {depth} <= near plane {near})")]
    BehindCamera { depth: f64, near: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: file has {found}, supported is {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
