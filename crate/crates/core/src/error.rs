use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor kernels and the differentiation tape.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("configuration error in {op}: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn config(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Config { op, detail: detail.into() }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown label {label:?}; known labels: {known:?}")]
    UnknownLabel { label: String, known: Vec<String> },
    #[error("vocabulary mismatch: expected {expected:?}, found {found:?}")]
    VocabularyMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("format error in {}: {detail} (offset {offset})", file.display())]
    Format { file: PathBuf, offset: u64, detail: String },
    #[error("parameter names do not match the model configuration; missing: {missing:?}, extra: {extra:?}")]
    NameSet { missing: Vec<String>, extra: Vec<String> },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error in {}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { file: path.into(), offset, detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
