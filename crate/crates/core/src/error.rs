use thiserror::Error;

/// Errors raised by the ProMP model, estimators and pipelines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("trajectory has {0} samples, need at least 2")]
    DegenerateTrajectory(usize),
    #[error("timestamps are not strictly increasing at index {0}")]
    NonMonotoneTime(usize),
    #[error("covariance matrix is singular or not positive definite ({0})")]
    SingularCovariance(&'static str),
    #[error("need at least {needed} demonstrations, got {got}")]
    InsufficientDemos { needed: usize, got: usize },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("reference has zero Frobenius norm")]
    DegenerateReference,
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("malformed data: {0}")]
    Data(String),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::SingularCovariance(_))
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegenerateTrajectory(_) => "degenerate_trajectory",
            Error::NonMonotoneTime(_) => "non_monotone_time",
            Error::SingularCovariance(_) => "singular_covariance",
            Error::InsufficientDemos { .. } => "insufficient_demos",
            Error::InvalidPrior(_) => "invalid_prior",
            Error::Config(_) => "config_error",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::DegenerateReference => "degenerate_reference",
            Error::InvalidCount(_) => "invalid_count",
            Error::InvalidSplit(_) => "invalid_split",
            Error::Data(_) => "data_error",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
