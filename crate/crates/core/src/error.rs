use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration; the string names the offending key.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input that violates an operation's preconditions.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Analysis requested for a positional mode that does not support it.
    #[error("unsupported positional mode: {0}")]
    UnsupportedMode(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing analysis `{what}`: rerun with toggle `{toggle}`")]
    MissingAnalysis { what: String, toggle: String },

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by the user's configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
