//! Crate-wide error type. Every fallible public API returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the attempted operation.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// A math domain violation (log/sqrt of a non-positive value, asin out of
    /// range, ...). Signalled eagerly instead of letting NaNs propagate.
    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },

    /// Invalid configuration or arguments (bad field values, infeasible edge
    /// counts, dimension mismatches between artifacts, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A simulation or training run produced non-finite values it could not
    /// recover from.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Malformed on-disk artifact (bad magic, truncated payload, ...).
    #[error("format error in {path}: {details}")]
    Format { path: String, details: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    pub fn domain(op: &'static str, details: impl Into<String>) -> Self {
        Error::Domain { op, details: details.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Format { path: path.into(), details: details.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
