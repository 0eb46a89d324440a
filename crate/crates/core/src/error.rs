use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A loss or gradient became NaN/inf. The context names round and client
    /// when the failure happened inside a federation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("malformed file at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },

    #[error("{path}: {source}")]
    Path {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn path(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Path { path: path.as_ref().display().to_string(), source }
    }

    /// True for failures caused by the optimisation diverging, as opposed to
    /// bad input or I/O.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
