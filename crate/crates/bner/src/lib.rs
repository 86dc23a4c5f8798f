//! Empirical best prediction of bivariate small-area parameters (domain
//! means, means of unit ratios, ratios of domain means) under a bivariate
//! nested error regression model, with REML fitting, closed-form conditional
//! sampling, parametric bootstrap MSE estimation and a reproducible
//! simulation harness.

pub mod bootstrap;
pub mod cov;
pub mod ebp;
pub mod error;
pub mod io;
pub mod model;
pub mod reml;
pub mod rng;
pub mod sim;

pub use cov::{build_cov2, chol2, Mat2, Vec2};
pub use error::{Error, Result};
pub use model::{
    marginal_cov_domain, AuxCounts, CovariatePattern, DomainData, ModelParams,
    RegressionCoefficients, SampleData, Transform, UnitData, UnitRecord, VarianceComponents,
};
