//! Lyapunov exponents of simple random walks killed by i.i.d. nonnegative potentials,
//! on the integers and on regular trees.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); Monte Carlo
//! estimators and the variational machinery work in `f64`. The aliases below fix
//! the scalar to `f64` for everyday use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod entropy;
pub mod env;
pub mod error;
pub mod line_solver;
pub mod lyapunov;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tree;
pub mod tridiag;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PotentialDistribution = env::PotentialDistribution<f64>;
pub type Environment = env::Environment<f64>;
pub type WindowModel = line_solver::WindowModel<f64>;
pub type SurvivalResult = line_solver::SurvivalResult<f64>;

pub type PotentialDistributionF32 = env::PotentialDistribution<f32>;
pub type EnvironmentF32 = env::Environment<f32>;
pub type WindowModelF32 = line_solver::WindowModel<f32>;

pub use lyapunov::LyapunovEstimate;
