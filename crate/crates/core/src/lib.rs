//! Maximum marginal likelihood for linear and nonlinear mixed-effects models,
//! and the shrinked parametric bootstrap test for the nullity of variance
//! components.
//!
//! The model is `y_ij = g(x_ij, beta, Lambda xi_i) + eps_ij` with
//! `xi_i ~ N(0, I_p)`, `eps_ij ~ N(0, sigma2)` and `Lambda` lower triangular with
//! a nonnegative diagonal. Testing that some rows of `Lambda` vanish puts the
//! true parameter on the boundary of the parameter space; the bootstrap in
//! [`testing`] generates its resamples from a thresholded estimate so that
//! untested variances that are (near) zero are treated as such.
//!
//! The crate is `no_std` and only needs `alloc`. IO, parallel drivers and the
//! command line live in the `vcboot` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod estimate;
pub mod likelihood;
pub mod means;
pub mod model;
pub mod optim;
pub mod quadrature;
pub mod testing;

mod linalg;

pub use error::{Error, Result};
pub use estimate::{fit_nested, mle_full, mle_null, FitMethod, FitOptions, FitResult};
pub use likelihood::{individual_loglik, loglik, simulate_dataset, QuadratureConfig};
pub use means::{Covariate, LinearPredictor, Logistic, Term};
pub use model::{
    gamma_of, mean_eval, project_to_null, CovarianceStructure, Dataset, Individual, MeanFunction, Model, ParamBounds,
    TestSpec, Theta,
};
pub use testing::{
    asymptotic_pvalue_single, bootstrap_pvalue, bootstrap_test, default_shrink, lrt_statistic, shrink_parameter,
    BootstrapConfig, BootstrapPlan, BootstrapResult, SeedEstimate, ShrinkPolicy, ShrinkScope,
};
