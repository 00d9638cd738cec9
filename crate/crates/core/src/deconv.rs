//! Deconvolution kernel density estimator for Laplace noise.
//!
//! With `phi_Z(t) = 1 / (1 + t^2)` the deconvoluting kernel of a Gaussian
//! `K` is `K - K''`, so
//! `g_hat(y) = (1/n) sum_i [K_h(y - X_i) - K_h''(y - X_i)]`.

use serde::{Deserialize, Serialize};

use crate::metrics::{DensityGrid, GridSpec, StepCdf};
use crate::{Error, Result};

/// Kernel terms are dropped beyond this many bandwidths.
const KERNEL_REACH: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeconvConfig {
    pub bandwidth: f64,
    pub grid: GridSpec,
}

impl DeconvConfig {
    /// Bandwidth `n^(-1/5)`.
    pub fn for_data(x: &[f64]) -> Result<Self> {
        check_data(x)?;
        Self::with_bandwidth(x, (x.len() as f64).powf(-0.2))
    }

    /// Grid covering the data hull plus the kernel reach, with spacing
    /// `min(0.01, h / 20)`.
    pub fn with_bandwidth(x: &[f64], bandwidth: f64) -> Result<Self> {
        check_data(x)?;
        check_bandwidth(bandwidth)?;
        let (lo, hi) = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let pad = KERNEL_REACH * bandwidth + 0.5;
        let step = (bandwidth / 20.0).min(0.01);
        Ok(Self {
            bandwidth,
            grid: GridSpec::covering(lo - pad, hi + pad, step)?,
        })
    }
}

fn check_data(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyData);
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData { index });
    }
    Ok(())
}

fn check_bandwidth(h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::param("bandwidth", format!("must be positive, got {h}")));
    }
    Ok(())
}

/// `K_h(u) - K_h''(u)` for the Gaussian kernel.
pub fn deconvoluting_kernel(u: f64, h: f64) -> f64 {
    let v = u / h;
    let phi = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi / h * (1.0 - (v * v - 1.0) / (h * h))
}

/// Raw estimate on `cfg.grid`; may be negative.
pub fn deconv_density(x: &[f64], cfg: &DeconvConfig) -> Result<DensityGrid> {
    check_data(x)?;
    check_bandwidth(cfg.bandwidth)?;
    let h = cfg.bandwidth;
    let grid = cfg.grid;
    let mut values = vec![0.0; grid.len];
    let reach = KERNEL_REACH * h;
    let scale = 1.0 / x.len() as f64;
    for &xi in x {
        let first = ((xi - reach - grid.lo) / grid.step).ceil().max(0.0) as usize;
        let last = ((xi + reach - grid.lo) / grid.step).floor();
        if last < 0.0 {
            continue;
        }
        let last = (last as usize).min(grid.len.saturating_sub(1));
        for (k, v) in values.iter_mut().enumerate().take(last + 1).skip(first) {
            *v += scale * deconvoluting_kernel(grid.point(k) - xi, h);
        }
    }
    DensityGrid::new(grid, values)
}

/// Negative parts set to zero, then rescaled to unit Riemann sum.
pub fn nonnegative(g: &DensityGrid) -> Result<DensityGrid> {
    let clipped: Vec<f64> = g.values.iter().map(|v| v.max(0.0)).collect();
    let total = g.grid.step * clipped.iter().sum::<f64>();
    if !(total > 0.0) {
        return Err(Error::InvalidDistribution("estimate has no positive part".into()));
    }
    DensityGrid::new(g.grid, clipped.into_iter().map(|v| v / total).collect())
}

/// Grid CDF of the nonnegative estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvCdf {
    pub grid: GridSpec,
    /// CDF at every grid point; nondecreasing, last value exactly 1.
    pub values: Vec<f64>,
    pub cdf: StepCdf,
}

/// Cumulative sum of the nonnegative, renormalized density.
pub fn deconv_cdf(x: &[f64], cfg: &DeconvConfig) -> Result<DeconvCdf> {
    let g = nonnegative(&deconv_density(x, cfg)?)?;
    let mut running = 0.0;
    let mut values: Vec<f64> = g
        .values
        .iter()
        .map(|v| {
            running += v * g.grid.step;
            running.clamp(0.0, 1.0)
        })
        .collect();
    if let Some(last) = values.last_mut() {
        *last = 1.0;
    }
    for k in 1..values.len() {
        values[k] = values[k].max(values[k - 1]);
    }
    Ok(DeconvCdf {
        grid: g.grid,
        cdf: StepCdf::from_grid(g.grid, &values)?,
        values,
    })
}
