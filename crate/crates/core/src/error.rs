use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("patient {patient}: file not found: {path}")]
    MissingFile { patient: String, path: PathBuf },

    #[error("patient {patient}: {what} lists {got} entries, expected {expected}")]
    LengthMismatch {
        patient: String,
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("patient {patient}: unknown pixel encoding `{encoding}`")]
    UnknownEncoding { patient: String, encoding: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } | Error::Json { .. } => 2,
            Error::MissingFile { .. } | Error::LengthMismatch { .. } | Error::UnknownEncoding { .. } => 2,
            Error::Shape { .. } | Error::Dimension { .. } => 2,
            Error::NonFinite { .. }
            | Error::NonFiniteGradient(_)
            | Error::Numerical(_)
            | Error::UndefinedMetric(_) => 3,
        }
    }
}
