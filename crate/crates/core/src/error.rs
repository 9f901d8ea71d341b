use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not an element of se(2): {0}")]
    NotInAlgebra(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("cubature dimension {0} exceeds the supported maximum of 8")]
    DimensionTooLarge(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance is not symmetric positive definite: {0}")]
    CovarianceNotSpd(String),
    #[error("perturbation side mismatch: distribution uses {expected:?}, caller asked for {got:?}")]
    SideMismatch {
        expected: crate::liegroup::Side,
        got: crate::liegroup::Side,
    },
    #[error("odometry stream is empty")]
    EmptyOdometry,
    #[error("range measurement at t = {0} s precedes the first pose")]
    RangeBeforeFirstPose(f64),
    #[error("state index {index} out of range for {len} states")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("information matrix is not positive definite at block {block}")]
    InfoNotSpd { block: usize },
    #[error("line search failed after {0} backtracks")]
    LineSearchFailed(usize),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
