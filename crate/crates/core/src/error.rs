use std::path::PathBuf;

/// Errors raised by accounting, simulation and serialization routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("quadrature did not converge: {0}")]
    NonConvergence(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing samples: {0}")]
    MissingSamples(String),

    #[error("sample {value} exceeds declared bound {bound}")]
    BoundExceeded { value: f64, bound: f64 },

    #[error("divergence source cannot supply order {order} for request {request}")]
    MissingOrder { request: usize, order: f64 },

    #[error("divergence source exhausted at request {0}")]
    SourceExhausted(usize),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: line {line}: schema version {found}, expected {expected}")]
    SchemaVersion {
        path: PathBuf,
        line: usize,
        found: String,
        expected: u32,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Domain(_) => ErrorKind::Usage,
            Error::Overflow(_) | Error::NonConvergence(_) | Error::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
