use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CedError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("token id {id} is out of vocabulary (size {vocab_size})")]
    OutOfVocabulary { id: usize, vocab_size: usize },

    #[error("target sequence must start with the CLS token (id {cls}), found {found:?}")]
    MissingCls { cls: usize, found: Option<usize> },

    #[error("invalid value for `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("augmentation backend failed for sample {source_id}: {message}")]
    Backend {
        source_id: u64,
        message: String,
        retryable: bool,
    },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CedError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CedError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        CedError::InvalidShape(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CedError::Io {
            path: path.into(),
            source,
        }
    }
}
