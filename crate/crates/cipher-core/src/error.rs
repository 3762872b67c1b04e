//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, Error)]
pub enum CipherError {
    /// Invalid input data, schema, query set, or configuration.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Numerical failure (singular system, non-finite values, size guards).
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CipherError>;

impl CipherError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CipherError::Invalid(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CipherError::Numerical(msg.into())
    }

    /// Process exit code: 2 for validation problems, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            CipherError::Numerical(_) => 3,
            _ => 2,
        }
    }
}
