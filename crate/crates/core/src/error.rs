use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("decode error at {location}: {message}")]
    Decode { location: String, message: String },

    #[error("unsupported channel layout: {0}")]
    Channel(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("manifest line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },

    #[error("insufficient rows for {what}: need {needed}, have {available}")]
    InsufficientRows {
        what: String,
        needed: usize,
        available: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}, lr {lr:e}")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("training needs at least 2 classes, got {0}")]
    SingleClass(usize),

    #[error("missing external file for `{id}`: {path}")]
    MissingExternal { id: String, path: PathBuf },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty {axis} {index} in confusion matrix")]
    EmptyAxis { axis: &'static str, index: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("self checks failed: {0}")]
    SelfTest(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Whether the error is caused by user input (bad files, bad configuration)
    /// rather than a failure inside the toolkit.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. } | Error::Shape { .. } | Error::SelfTest(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
