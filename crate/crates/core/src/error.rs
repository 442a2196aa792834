//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A mesh file could not be parsed. Carries the offending line number.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Input violated a structural invariant (bad index, empty mesh, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Geometry too degenerate to process (e.g. all vertices coincident).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// An argument was outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Patch count cannot be apportioned across mesh components.
    #[error("apportionment error: {0}")]
    Apportionment(String),

    /// Tensor shape mismatch, naming the operation and operands.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A numeric routine failed to converge or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training aborted (non-finite loss or gradient).
    #[error("training error: {0}")]
    Training(String),

    /// A precompute cache entry does not match the current mesh.
    #[error("stale cache: {0}")]
    StaleCache(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 1 for user errors, 2 for
    /// internal/numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Training(_) | Error::Shape { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
