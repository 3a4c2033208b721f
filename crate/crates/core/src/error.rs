use thiserror::Error;

/// Errors produced anywhere in the sampling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} = {got} exceeds the configured limit {limit}")]
    Size {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("unsupported dimension d = {dim}: {reason}")]
    UnsupportedDimension { dim: usize, reason: &'static str },

    #[error("point set is empty")]
    EmptyPointSet,

    #[error("duplicate points at indices {first} and {second}")]
    DuplicatePoint { first: usize, second: usize },

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("iteration diverged: {0}")]
    Divergence(String),

    #[error("eigensolver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::Size { .. }
            | Error::UnsupportedDimension { .. }
            | Error::EmptyPointSet
            | Error::DuplicatePoint { .. }
            | Error::NonFinite { .. }
            | Error::Parse { .. }
            | Error::DimensionMismatch { .. } => ErrorClass::Config,
            Error::LinearAlgebra(_)
            | Error::NotPositiveDefinite(_)
            | Error::Divergence(_)
            | Error::NoConvergence { .. } => ErrorClass::Numerical,
            Error::Io(_) => ErrorClass::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
