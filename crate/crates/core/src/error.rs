use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("parse error at line {row}, column {column}: cannot read {value:?} as a number")]
    Parse {
        row: usize,
        column: usize,
        value: String,
    },

    #[error("non-finite value at line {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("label at line {row} is {value:?}; labels must be 0 or 1")]
    NonBinaryLabel { row: usize, value: String },

    #[error("label column {0} not found")]
    MissingLabelColumn(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range (size {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty index set")]
    EmptySelection,

    #[error("labels contain a single class{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    SingleClass { context: Option<String> },

    #[error("no variance: every training row is identical")]
    NoVariance,

    #[error("k-means: {0}")]
    Clustering(String),

    #[error("non-finite loss during optimization after {iterations} iterations")]
    NonFiniteLoss { iterations: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn single_class(context: impl Into<String>) -> Self {
        Error::SingleClass {
            context: Some(context.into()),
        }
    }

    /// Attributes the error to a named pipeline stage.
    pub fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Stage { source, .. } => source.kind(),
            Error::Config(_) => ErrorKind::Config,
            Error::NonFiniteLoss { .. } | Error::NoVariance => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
