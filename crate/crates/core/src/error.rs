use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QdfError>;

#[derive(Debug, Error)]
pub enum QdfError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("ill-conditioned weighting matrix: {0}")]
    Conditioning(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid AR specification: {0}")]
    Spec(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl QdfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QdfError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            QdfError::Conditioning(_)
            | QdfError::Numeric(_)
            | QdfError::UndefinedCorrelation(_) => ErrorKind::Numeric,
            QdfError::Config(_) | QdfError::Spec(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    /// Short stable tag for machine-readable error output.
    pub fn code(&self) -> &'static str {
        match self {
            QdfError::InvalidDimension(_) => "invalid_dimension",
            QdfError::Conditioning(_) => "conditioning",
            QdfError::EmptyInput(_) => "empty_input",
            QdfError::InvalidSplit(_) => "invalid_split",
            QdfError::InsufficientData(_) => "insufficient_data",
            QdfError::Numeric(_) => "numeric",
            QdfError::Spec(_) => "spec",
            QdfError::UndefinedCorrelation(_) => "undefined_correlation",
            QdfError::Config(_) => "config",
            QdfError::Parse { .. } => "parse",
            QdfError::Io { .. } => "io",
            QdfError::Csv(_) => "csv",
            QdfError::Json(_) => "json",
        }
    }
}
