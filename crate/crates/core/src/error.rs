use std::io;

use thiserror::Error;

/// Errors produced by the search engine and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("length error: {0}")]
    Length(String),

    /// A non-finite loss or gradient; `snapshot` names the file written for inspection, if any.
    #[error("numeric failure: {message}{}", .snapshot.as_ref().map(|p| format!(" (snapshot: {p})")).unwrap_or_default())]
    Numeric {
        message: String,
        snapshot: Option<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}

pub(crate) use arg_err;
pub(crate) use dim_err;
