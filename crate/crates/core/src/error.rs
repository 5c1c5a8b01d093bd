use thiserror::Error;

/// Errors produced by the modeling, solving, and estimation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("batch size must be non-negative, got {0}")]
    NegativeBatch(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("allocation has {got} entries but the cluster has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },

    #[error("allocation entries sum to {sum} but the total is {total}")]
    AllocationSum { sum: f64, total: u64 },

    #[error("node {node} has zero time-per-sample slope; the equal-time system is singular")]
    SingularModel { node: usize },

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("node {node}: all observations share one batch size; need two distinct values to fit a line")]
    InsufficientDiversity { node: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("gradient vectors disagree in dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),

    #[error("ratios sum to {0}, expected 1")]
    RatioSum(f64),

    #[error("local batch {b} of node {node} must lie strictly inside (0, {total}) for noise-scale estimation")]
    DegenerateBatch { node: usize, b: f64, total: f64 },

    #[error("weight matrix is singular")]
    SingularMatrix,

    #[error("grid oracle would evaluate {points:.3e} points, above the guard of {guard:.3e}")]
    GridGuard { points: f64, guard: f64 },

    #[error("noise-scale estimate is unusable: aggregated signal term is {0} <= 0")]
    UnusableEstimate(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
