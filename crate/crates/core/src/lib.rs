//! Empirical Bayes shrinkage of vectors of fixed effects estimated from
//! panel data, with hyperparameters chosen by minimizing an unbiased risk
//! estimate.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix it to one of them.

pub mod constraints;
pub mod error;
pub mod fit;
pub mod forecast;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod panel;
pub mod scalar;
pub mod shrinkage;
pub mod simlab;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Problem = model::NormalMeansProblem<f64>;
pub type Problem32 = model::NormalMeansProblem<f32>;
pub type UnitData = model::Unit<f64>;
pub type UnitData32 = model::Unit<f32>;
pub type Hyper = model::HyperParams<f64>;
pub type Hyper32 = model::HyperParams<f32>;
pub type Fit = model::FitResult<f64>;
pub type Fit32 = model::FitResult<f32>;
