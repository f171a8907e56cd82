use std::path::PathBuf;

use idgen_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("embedding: {0}")]
    Embedding(String),

    #[error("embedding coverage: column {column} starts {gap} samples after column {prev} (height {height})")]
    Coverage {
        prev: usize,
        column: usize,
        gap: usize,
        height: usize,
    },

    #[error("padding region of channel {channel} holds non-zero value {value} at ({row}, {col})")]
    DirtyPadding {
        channel: usize,
        row: usize,
        col: usize,
        value: f32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown label `{label}` (valid: {})", valid.join(", "))]
    UnknownLabel { label: String, valid: Vec<String> },

    #[error("data: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("container: {0}")]
    Container(String),

    #[error("{what}: non-finite value at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Short stable category name, for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Embedding(_) | Error::Coverage { .. } | Error::DirtyPadding { .. } => "embedding",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::UnknownLabel { .. } => "label",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Container(_) => "container",
            Error::NonFinite { .. } => "non-finite",
            Error::Invalid(_) => "invalid",
        }
    }
}
