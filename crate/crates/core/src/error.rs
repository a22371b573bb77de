use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, XftError>;

#[derive(Debug, Error)]
pub enum XftError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {message}")]
    Dataset { path: PathBuf, line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl XftError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XftError::Io { path: path.into(), source }
    }

    /// Process exit code used by the CLI: 2 for I/O, parse and runtime
    /// failures, 3 for a failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            XftError::Verification(_) => 3,
            _ => 2,
        }
    }
}
