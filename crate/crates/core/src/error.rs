use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TtlError>;

#[derive(Debug, Error)]
pub enum TtlError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    Corruption(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TtlError {
    /// Short machine-readable tag, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            TtlError::Domain(_) => "domain",
            TtlError::Format(_) => "format",
            TtlError::Corruption(_) => "corruption",
            TtlError::Config(_) => "config",
            TtlError::Argument(_) => "argument",
            TtlError::Degenerate(_) => "degenerate",
            TtlError::Evaluation(_) => "evaluation",
            TtlError::Io { .. } => "io",
            TtlError::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        TtlError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
