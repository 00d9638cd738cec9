//! Distances between densities and between mixing distributions, plus
//! numerical checks of the inequalities that relate them.

mod bias;
mod cdf;
mod density;
mod grid;
mod inequality;

pub use bias::{bias_limit, bias_rate_check, squared_bias, write_bias_csv, BiasPoint, ErrorLaw, SmoothingKernel};
pub use cdf::{w1_distance, wp_distance, StepCdf};
pub use density::{hellinger, kl_divergence, l1_distance, l2_distance, v_moment, DensityMetrics};
pub use grid::{DensityGrid, GridSpec};
pub use inequality::{
    inversion_inequality_check, l2_hellinger_bound_check, perturbation_sweep, write_inequality_csv,
    write_inversion_csv, DistanceKind, InequalityReport, InversionReport,
};
