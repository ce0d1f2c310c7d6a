use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped so that callers (the CLI in particular) can map them
/// onto configuration, data, and numeric failure classes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}:{line}: invalid UTF-8")]
    Encoding { path: PathBuf, line: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("train/test overlap: {} offending line(s), first: {:?}", .0.len(), .0.first())]
    Overlap(Vec<String>),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("reproducibility failure: {0}")]
    Reproducibility(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse failure class, used for process exit codes.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

pub type Result<T> = std::result::Result<T, Error>;
