use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("gradient oracle error: {0}")]
    Oracle(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("output {0} already exists (use --force to overwrite)")]
    Exists(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Empty(_) => "empty",
            Error::Alignment(_) => "alignment",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Oracle(_) => "oracle",
            Error::Format(_) => "format",
            Error::Load(_) => "load",
            Error::NonFinite(_) => "non-finite",
            Error::Exists(_) => "exists",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
