//! Expectation propagation for Poisson likelihoods with Laplace-type (anisotropic
//! total variation) priors, with MAP, Laplace-approximation and random-walk
//! Metropolis baselines.

// `!(x > 0.0)` is used on purpose so NaN fails validation; reference values
// keep all the digits they were computed with.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod baselines;
pub mod ep;
pub mod gaussian;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod parallel;
pub mod problem;
pub mod site_laplace;
pub mod site_poisson;
pub mod special;
pub mod tilted;
