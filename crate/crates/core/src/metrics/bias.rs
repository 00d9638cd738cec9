//! Smoothing bias of densities whose Fourier transforms decay algebraically.
//!
//! For `|t|^beta |f^(t)| -> B` and a kernel with `K^(0) = 1`,
//! `h^{-2(beta - 1/2)} ||f - f * K_h||_2^2` tends to
//! `B^2 I_beta[K^] / (2 pi)` where `I_beta[K^] = \int |1 - K^(t)|^2 / |t|^{2 beta} dt`.
//! Both sides are evaluated in the frequency domain through Plancherel.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::quadrature::kronrod15;
use crate::{Error, Result};

/// Density whose Fourier transform decays like `B |t|^{-beta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ErrorLaw {
    /// Standard Laplace, `f^(t) = 1 / (1 + t^2)`.
    Laplace,
    /// Gamma law with `f^(t) = (1 + i t / lambda)^{-nu}`.
    Gamma { nu: f64, lambda: f64 },
    /// Linnik law, `f^(t) = 1 / (1 + |t|^alpha)` with `0 < alpha <= 2`.
    Linnik { alpha: f64 },
}

impl ErrorLaw {
    pub fn beta(&self) -> f64 {
        match *self {
            ErrorLaw::Laplace => 2.0,
            ErrorLaw::Gamma { nu, .. } => nu,
            ErrorLaw::Linnik { alpha } => alpha,
        }
    }

    /// Constant `B` in `|t|^beta |f^(t)| -> B`.
    pub fn decay_constant(&self) -> f64 {
        match *self {
            ErrorLaw::Laplace | ErrorLaw::Linnik { .. } => 1.0,
            ErrorLaw::Gamma { nu, lambda } => lambda.powf(nu),
        }
    }

    /// `|f^(t)|^2`.
    pub fn ft_modulus_sq(&self, t: f64) -> f64 {
        match *self {
            ErrorLaw::Laplace => (1.0 + t * t).powi(-2),
            ErrorLaw::Gamma { nu, lambda } => (1.0 + (t / lambda).powi(2)).powf(-nu),
            ErrorLaw::Linnik { alpha } => (1.0 + t.abs().powf(alpha)).powi(-2),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ErrorLaw::Laplace => {}
            ErrorLaw::Gamma { nu, lambda } => {
                if !(nu > 0.0 && lambda > 0.0) {
                    return Err(Error::param("gamma", "shape and rate must be positive"));
                }
            }
            ErrorLaw::Linnik { alpha } => {
                if !(alpha > 0.0 && alpha <= 2.0) {
                    return Err(Error::param("alpha", "must lie in (0, 2]"));
                }
            }
        }
        if self.beta() <= 0.5 {
            return Err(Error::param("beta", "density is not square integrable for beta <= 1/2"));
        }
        Ok(())
    }
}

/// Symmetric smoothing kernels, described by their Fourier transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingKernel {
    Gaussian,
    Epanechnikov,
    /// `K^ = 1` on `[-1, 1]`, zero outside.
    Sinc,
    /// `K^(t) = exp(-|t|)`.
    Cauchy,
    /// `K^ = 1`: no smoothing at all.
    Dirac,
}

impl SmoothingKernel {
    pub fn ft(&self, t: f64) -> f64 {
        match self {
            SmoothingKernel::Gaussian => (-0.5 * t * t).exp(),
            SmoothingKernel::Epanechnikov => {
                let a = t.abs();
                if a < 1e-2 {
                    let t2 = t * t;
                    1.0 - t2 / 10.0 + t2 * t2 / 280.0
                } else {
                    3.0 * (a.sin() - a * a.cos()) / (a * a * a)
                }
            }
            SmoothingKernel::Sinc => {
                if t.abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SmoothingKernel::Cauchy => (-t.abs()).exp(),
            SmoothingKernel::Dirac => 1.0,
        }
    }

    /// Order `r` of the first nonvanishing moment; infinite for kernels
    /// whose transform is flat at the origin.
    pub fn characteristic_exponent(&self) -> f64 {
        match self {
            SmoothingKernel::Gaussian | SmoothingKernel::Epanechnikov => 2.0,
            SmoothingKernel::Cauchy => 1.0,
            SmoothingKernel::Sinc | SmoothingKernel::Dirac => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasPoint {
    pub h: f64,
    pub scaled_bias: f64,
}

// Geometric panels r^k, |k| <= PANELS, with a node at 1 where the sinc
// transform jumps.
const PANEL_RATIO: f64 = 1.05;
const PANELS: i32 = 300;

/// `\int_0^inf g(z) dz` on the panel grid plus a tail `tail(zmax)`.
fn half_line(g: impl Fn(f64) -> f64, tail: impl Fn(f64) -> f64) -> f64 {
    let zmin = PANEL_RATIO.powi(-PANELS);
    let mut total = kronrod15(&g, 0.0, zmin);
    let mut lo = zmin;
    for k in (-PANELS + 1)..=PANELS {
        let hi = PANEL_RATIO.powi(k);
        total += kronrod15(&g, lo, hi);
        lo = hi;
    }
    total + tail(lo)
}

fn check_pair(law: &ErrorLaw, kernel: SmoothingKernel) -> Result<()> {
    law.validate()?;
    let order = kernel.characteristic_exponent();
    if order < law.beta() {
        return Err(Error::KernelOrder {
            order,
            beta: law.beta(),
        });
    }
    Ok(())
}

/// Beyond the last panel `|1 - K^|^2 -> 1` and `|f^(z/h)|^2 ~ B^2 (z/h)^{-2 beta}`.
fn power_tail(law: &ErrorLaw, kernel: SmoothingKernel, scale: f64, z: f64) -> f64 {
    if kernel == SmoothingKernel::Dirac {
        return 0.0;
    }
    let beta = law.beta();
    let b = law.decay_constant();
    b * b * scale * z.powf(1.0 - 2.0 * beta) / (2.0 * beta - 1.0)
}

/// `||f - f * K_h||_2^2 = (2 pi)^{-1} \int |f^(t)|^2 |1 - K^(h t)|^2 dt`.
pub fn squared_bias(law: &ErrorLaw, kernel: SmoothingKernel, h: f64) -> Result<f64> {
    check_pair(law, kernel)?;
    if !(h > 0.0) {
        return Err(Error::param("h", "bandwidth must be positive"));
    }
    // Substitute z = h t; both halves of the line are equal.
    let beta = law.beta();
    let integral = half_line(
        |z| law.ft_modulus_sq(z / h) * (1.0 - kernel.ft(z)).powi(2) / h,
        |z| power_tail(law, kernel, h.powf(2.0 * beta - 1.0), z),
    );
    Ok(integral / PI)
}

/// `B^2 I_beta[K^] / (2 pi)`.
pub fn bias_limit(law: &ErrorLaw, kernel: SmoothingKernel) -> Result<f64> {
    check_pair(law, kernel)?;
    let beta = law.beta();
    let b = law.decay_constant();
    let half = half_line(
        |t| (1.0 - kernel.ft(t)).powi(2) / t.powf(2.0 * beta),
        |z| power_tail(law, kernel, 1.0 / (b * b), z),
    );
    Ok(b * b * 2.0 * half / (2.0 * PI))
}

/// Scaled bias `h^{-2(beta - 1/2)} ||f - f * K_h||_2^2` along a decreasing
/// bandwidth sequence.
pub fn bias_rate_check(law: &ErrorLaw, kernel: SmoothingKernel, h_grid: &[f64]) -> Result<Vec<BiasPoint>> {
    check_pair(law, kernel)?;
    if h_grid.is_empty()
        || h_grid.iter().any(|&h| !(h > 0.0) || !h.is_finite())
        || h_grid.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::param("h_grid", "must be a nonempty decreasing list of positive reals"));
    }
    let exponent = 2.0 * (law.beta() - 0.5);
    h_grid
        .iter()
        .map(|&h| {
            Ok(BiasPoint {
                h,
                scaled_bias: squared_bias(law, kernel, h)? / h.powf(exponent),
            })
        })
        .collect()
}

/// CSV with columns `h,scaled_bias`.
pub fn write_bias_csv<W: Write>(w: W, rows: &[BiasPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["h", "scaled_bias"])?;
    for r in rows {
        out.write_record([r.h.to_string(), r.scaled_bias.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
