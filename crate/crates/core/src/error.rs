use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("covariance density is singular on the diagonal u = v = {0}")]
    DiagonalSingularity(f64),

    #[error("quadrature did not converge: estimate {estimate:e}, error {error:e} after {intervals} intervals")]
    QuadratureNonConvergence {
        estimate: f64,
        error: f64,
        intervals: usize,
    },

    #[error("increment covariance is not positive semidefinite (failed at jitter {jitter:e}, row {row})")]
    CovarianceNotPsd { jitter: f64, row: usize },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("time {0} is not a point of the sample grid")]
    GridMismatch(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("negative time {0}")]
    NegativeTime(f64),

    #[error("delay segment has {got} slots, expected {expected}")]
    SegmentUnderflow { expected: usize, got: usize },

    #[error("step {dt} exceeds the delay {r} while the neutral operator D is nonzero")]
    StepLargerThanDelay { dt: f64, r: f64 },

    #[error("delay {r} is not an integer multiple of the step {dt}")]
    DelayNotMultiple { r: f64, dt: f64 },

    #[error("averaging window [{from}, {to}] contains fewer than two grid points")]
    EmptyWindow { from: f64, to: f64 },

    #[error("condition (H) violated: {0}")]
    ConditionHViolated(String),

    #[error("functional has no Lipschitz constant on its declared domain")]
    MissingLipschitzConstant,

    #[error("system is not exponentially stable (estimated rate {0})")]
    NotStable(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
