//! Nonparametric deconvolution of Laplace location mixtures.
//!
//! Observations are `X = Y + Z` with `Z` standard Laplace and `Y ~ G`
//! unknown. The crate estimates `G` by nonparametric maximum likelihood
//! ([`npmle`]) and by a Dirichlet-process posterior ([`dp`]), compares
//! estimates with density and Wasserstein metrics ([`metrics`]), provides a
//! kernel deconvolution baseline ([`deconv`]) and runs replicated
//! convergence-rate studies ([`harness`]).

pub mod deconv;
pub mod dp;
mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod npmle;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
pub use metrics::{DensityGrid, GridSpec, StepCdf};
pub use model::{DiscreteDistribution, GroundTruthSpec, MixtureDensity, Sample};
