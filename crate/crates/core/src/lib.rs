//! Numerical toolkit for neutral stochastic delay equations driven by
//! α-regular Volterra noise.
//!
//! * [`kernels`]: Volterra kernels, covariance density and increment covariance.
//! * [`sampling`]: exact Gaussian sampling of (cylindrical) Volterra paths.
//! * [`wiener`]: the `K*` transform and Wiener integrals of step functions.
//! * [`operators`]: spectral semigroup, delay operators, deterministic neutral
//!   solver and the lifted semigroup on `H × L²(−r, 0)`.
//! * [`solver`]: direct and lifted stochastic solvers and their equivalence check.
//! * [`ergodicity`]: condition (H), invariant covariance and ergodic time averages.

pub mod ergodicity;
pub mod error;
pub mod kernels;
pub mod operators;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod solver;
pub mod stats;
pub mod wiener;

pub use error::{Error, Result};
pub use kernels::{CovarianceQuery, KernelKind, VolterraKernel};
pub use quadrature::Tolerance;
