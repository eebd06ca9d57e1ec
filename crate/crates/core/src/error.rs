//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("fundamental solution evaluated at its pole (z == zeta)")]
    PoleEvaluation,

    #[error("kernel undefined outside the support of Gamma")]
    OutsideSupport,

    #[error("point has a non-finite coordinate: {0:?}")]
    NonFinitePoint(Vec<f64>),

    #[error("integrand returned a non-finite value {value} at {point:?}")]
    NonFiniteSample { point: Vec<f64>, value: f64 },

    #[error("invalid quadrature config: {0}")]
    InvalidConfig(String),

    #[error("field is missing derivatives and the finite-difference fallback is disabled")]
    MissingDerivatives,

    #[error("operator rejected: {0}")]
    OperatorRejected(String),

    #[error("unknown model id `{0}`")]
    UnknownModel(String),

    #[error("Q_r estimate is not positive beyond 3 standard errors (value {value}, stderr {stderr})")]
    NonPositiveQr { value: f64, stderr: f64 },

    #[error("grid interpolation requested outside the tabulated box at {0:?}")]
    OutsideGrid(Vec<f64>),

    #[error("grid file rejected: {0}")]
    GridFormat(String),

    #[error("grid metadata mismatch: {0}")]
    GridMismatch(String),

    #[error("grid resolution too coarse: {0}")]
    GridTooCoarse(String),

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
