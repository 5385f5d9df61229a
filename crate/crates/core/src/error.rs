use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid activation set: {0}")]
    InvalidActivations(String),

    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),

    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("activation source is empty")]
    EmptySource,

    #[error("objective became non-finite at alternation {alternation}; the step size is likely too large")]
    NonFiniteObjective { alternation: usize },

    #[error("lambda too large: every coefficient is zero at round {round} (lambda = {lambda})")]
    LambdaTooLarge { round: usize, lambda: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("bad magic bytes {0:?}, expected \"ACTV\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("truncated payload: header promises {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("payload has {extra} trailing bytes after {expected} expected bytes")]
    TrailingBytes { expected: u64, extra: u64 },

    #[error("label count {labels} does not match row count {rows}")]
    LabelCount { labels: usize, rows: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("parse error in {path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical procedure itself, as opposed to
    /// bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteObjective { .. } | Error::LambdaTooLarge { .. } | Error::DegenerateData(_)
        )
    }
}
