use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimation engine.
///
/// The variants mirror the failure classes callers need to tell apart:
/// bad input data, violated call contracts, and estimation that ran but
/// could not produce a usable answer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("validation failed:\n{0}")]
    Validation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn estimation(msg: impl Into<String>) -> Error {
    Error::Estimation(msg.into())
}
