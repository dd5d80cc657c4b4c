//! Error type shared by every module in the crate.

use std::io;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// The variants map onto the coarse categories the CLI reports (see
/// [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Data violates a documented invariant (non-finite values, bad boxes, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// A file does not start with the expected magic or uses an unknown version.
    #[error("format error: {0}")]
    Format(String),

    /// A file is structurally readable but its payload is truncated or inconsistent.
    #[error("corrupt file: {0}")]
    Corruption(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Validation(_) => "validation",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
