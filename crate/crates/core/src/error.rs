use std::path::PathBuf;

/// Errors produced anywhere in the tokenizer / generator pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{what}: index {index} out of range 0..{bound}")]
    OutOfRange {
        what: &'static str,
        index: u64,
        bound: u64,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced during {0}")]
    NonFinite(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: corrupt or unsupported file: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-parsable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "numeric",
            Error::Shape { .. }
            | Error::Invalid { .. }
            | Error::OutOfRange { .. }
            | Error::NonScalarLoss(_) => "invalid",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
