use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, vocab).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("non-finite value produced by `{op}`: {detail}")]
    NonFinite { op: String, detail: String },

    #[error("parse error in {file} at byte {offset}: {msg}")]
    Parse {
        file: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("frozen parameter drifted: {0}")]
    FrozenDrift(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for returning a [`Error::Contract`].
macro_rules! contract {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Contract(format!($($arg)*)))
    };
}
pub(crate) use contract;
