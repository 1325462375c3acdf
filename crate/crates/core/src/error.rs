use thiserror::Error;

use crate::minkowski::Signature;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("ambient dimension {0} too small (need n + 2 >= 5)")]
    AmbientTooSmall(usize),

    #[error("vectors are linearly dependent (smallest/largest singular value {ratio:.3e})")]
    LinearlyDependent { ratio: f64 },

    #[error("degenerate subspace: Gram condition number {condition:.3e}")]
    Degenerate { condition: f64 },

    #[error("expected signature {expected}, measured {found}")]
    SignatureMismatch { expected: Signature, found: Signature },

    #[error("unknown surface family `{0}`")]
    UnknownFamily(String),

    #[error("invalid parameters for `{family}`: {reason}")]
    InvalidParams { family: String, reason: String },

    #[error("operation not supported for `{0}`")]
    Unsupported(String),

    #[error("hypothesis `{hypothesis}` violated at grid point ({i}, {j}): value {value:.3e} exceeds {threshold:.3e}")]
    Hypothesis {
        hypothesis: &'static str,
        i: usize,
        j: usize,
        value: f64,
        threshold: f64,
    },

    #[error("inconsistent branch: {0}")]
    Inconsistent(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
