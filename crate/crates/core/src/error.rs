//! Error type shared by the library.

use std::path::PathBuf;

use thiserror::Error;

/// Library result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: duplicate id {id:?} at line {line}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("invalid record {id:?}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("context overflow: {needed} tokens exceed context length {context_len}")]
    ContextOverflow { needed: usize, context_len: usize },

    #[error("corrupt checkpoint {path}: {detail}")]
    CorruptCheckpoint { path: PathBuf, detail: String },

    #[error("leakage: {count} evaluation ids also appear in training data (first: {first:?})")]
    Leakage { count: usize, first: String },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("backend error: {message}")]
    Backend {
        status: Option<u16>,
        message: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 usage/config, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Backend { .. } => 3,
            _ => 2,
        }
    }
}
