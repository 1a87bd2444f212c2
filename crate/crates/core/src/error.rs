use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PacaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PacaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input {path}: {reason}")]
    MalformedInput { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("integrity error in {entry}: {reason}")]
    Integrity { entry: String, reason: String },
}

impl PacaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn integrity(entry: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Integrity { entry: entry.into(), reason: reason.into() }
    }

    /// Process exit code for command-line front ends.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Contract(_) => 2,
            Self::Io { .. } | Self::MalformedInput { .. } | Self::Dataset(_) => 3,
            Self::Numerical(_) => 4,
            Self::Integrity { .. } => 5,
        }
    }
}
