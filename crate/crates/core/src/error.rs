use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: shape mismatch, invalid schedule, unknown key.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid user-supplied input values (ids out of range, bad ratios, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    /// Non-finite values encountered during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Operation called in the wrong order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// The detail text without the category prefix.
    pub fn message(&self) -> String {
        match self {
            Error::Config(m) | Error::Input(m) | Error::Format(m) | Error::Numeric(m) | Error::State(m) => m.clone(),
            other => other.to_string(),
        }
    }
}
