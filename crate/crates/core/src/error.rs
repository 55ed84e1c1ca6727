use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor construction, ops and the autodiff tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid configuration: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },
    #[error("backward: {0}")]
    Usage(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        TensorError::Shape {
            op,
            detail: format!("{a:?} vs {b:?}"),
        }
    }

    pub(crate) fn config(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Config {
            op,
            detail: detail.into(),
        }
    }

    /// Prefixes a non-finite report with the block it occurred in.
    pub fn within(self, block: &str) -> Self {
        match self {
            TensorError::NonFinite { op } => TensorError::NonFinite {
                op: format!("{block}: {op}"),
            },
            other => other,
        }
    }
}

/// Crate-level error. Each variant maps onto a stable process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("line {line}: `{key}`: {message}")]
    ConfigLine {
        line: usize,
        key: String,
        message: String,
    },
    #[error("unknown config key `{key}`; valid keys: {}", valid.join(", "))]
    UnknownKey { key: String, valid: Vec<String> },
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("ingestion error at {}: {message}", path.display())]
    Ingestion { path: PathBuf, message: String },
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Stable process exit codes.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const VERIFICATION: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const MISMATCH: i32 = 3;
    pub const IO: i32 = 4;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingestion(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigLine { .. } | Error::UnknownKey { .. } => {
                exit_code::CONFIG
            }
            Error::Tensor(TensorError::Config { .. }) => exit_code::CONFIG,
            Error::Mismatch(_) | Error::Checkpoint(_) => exit_code::MISMATCH,
            Error::Ingestion { .. } | Error::Io { .. } => exit_code::IO,
            Error::Tensor(_) | Error::Numeric(_) | Error::Verification(_) => {
                exit_code::VERIFICATION
            }
        }
    }

    /// Short machine-readable category, used on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Config { .. })
            | Error::Config(_)
            | Error::ConfigLine { .. }
            | Error::UnknownKey { .. } => "config",
            Error::Tensor(TensorError::NonFinite { .. }) | Error::Numeric(_) => "numeric",
            Error::Tensor(_) => "tensor",
            Error::Mismatch(_) => "mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Ingestion { .. } => "ingestion",
            Error::Io { .. } => "io",
            Error::Verification(_) => "verification",
        }
    }
}
