use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the detection library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input too small: {0}")]
    Size(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("oracle guard: {0}")]
    OracleGuard(String),

    #[error("unsupported model type `{found}` (supported: {supported})")]
    UnknownModelType { found: String, supported: String },

    #[error("model schema version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("dataset load failed: {}", .0.join("; "))]
    Load(Vec<String>),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
