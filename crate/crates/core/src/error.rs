use std::path::PathBuf;

/// Errors produced by the audio front-end and feature plumbing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("content-feature backend failed after {attempts} attempt(s): {reason}")]
    Backend { attempts: u32, reason: String },

    #[error("corrupt feature cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
