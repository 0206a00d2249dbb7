#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure in {context}: {diagnostics}")]
    Numerical { context: String, diagnostics: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: std::path::PathBuf, reason: String },

    #[error("checkpoint version mismatch: file has {found}, this build expects {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Core(#[from] hiervc_core::Error),
}

impl ModelError {
    pub fn validation(msg: impl Into<String>) -> Self {
        ModelError::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        ModelError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
