use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed CSV at line {line}: {message}")]
    MalformedCsv { line: usize, message: String },

    #[error("duplicate {what} name {name:?}")]
    DuplicateName { what: &'static str, name: String },

    #[error("row {row:?} has no observed entries")]
    EmptyRow { row: String },

    #[error("column {column:?} has {observed} observed entries, need at least {required}")]
    SparseColumn {
        column: String,
        observed: usize,
        required: usize,
    },

    #[error("column {column:?} has zero variance over the observed training cells")]
    ZeroVariance { column: String },

    #[error("column {column:?}: {message}")]
    InvalidColumn { column: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("matrix has missing entries; {0}")]
    MissingData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (residual {0:e})")]
    NotPsd(f64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("unknown benchmark {0:?}")]
    UnknownBenchmark(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::NotSymmetric(_) | Error::NotPsd(_) | Error::Singular(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}
