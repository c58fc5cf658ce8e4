use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or file. Carries a human-readable diagnostic.
    #[error("config error: {0}")]
    Config(String),

    /// A random layout could not be generated (grid too full).
    #[error("infeasible layout: {0}")]
    Infeasible(String),

    /// Caller broke an operation's contract (e.g. stepping a finished episode).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Parameter shapes disagree (network construction or checkpoint load).
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
