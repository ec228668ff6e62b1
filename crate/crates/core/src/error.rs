use thiserror::Error;

/// Errors raised by the coverage engine and its supporting layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("matrix `{matrix}` is singular or not positive definite")]
    Singular { matrix: &'static str },

    #[error("||b|| = {value} lies outside [0, 1] beyond round-off; the design is malformed")]
    BNormOutOfRange { value: f64 },

    #[error("integrand is not finite at x = {abscissa}")]
    NonFiniteIntegrand { abscissa: f64 },

    #[error("quadrature did not reach tolerance within {budget} panels (achieved error {achieved:e})")]
    QuadratureBudget { budget: usize, achieved: f64 },

    #[error("{kind} invariant violated: {detail}")]
    Invariant { kind: &'static str, detail: String },

    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("dataset has no rows")]
    NoRows,

    #[error("unknown treatment id {0}")]
    UnknownTreatment(i64),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument { name, reason: reason.into() }
}
