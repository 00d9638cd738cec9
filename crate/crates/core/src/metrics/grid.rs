use serde::{Deserialize, Serialize};

use crate::model::laplace_kernel_sums;
use crate::{Error, Result};

/// Uniform grid `lo, lo + step, ..., lo + (len - 1) step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub step: f64,
    pub len: usize,
}

impl GridSpec {
    /// Smallest grid starting at `lo` with spacing `step` that reaches `hi`.
    pub fn covering(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !lo.is_finite() || !hi.is_finite() || hi < lo {
            return Err(Error::param("grid", format!("invalid grid [{lo}, {hi}] step {step}")));
        }
        let len = ((hi - lo) / step - 1e-9).ceil().max(0.0) as usize + 1;
        Ok(Self { lo, step, len })
    }

    pub fn hi(&self) -> f64 {
        self.point(self.len - 1)
    }

    #[inline]
    pub fn point(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|k| self.point(k)).collect()
    }

    pub(crate) fn matches(&self, other: &GridSpec) -> bool {
        self.len == other.len
            && (self.step - other.step).abs() <= 1e-12 * self.step
            && (self.lo - other.lo).abs() <= 1e-9 * self.step
    }
}

/// Function values on a uniform grid; a density when nonnegative with unit
/// Riemann sum.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len {
            return Err(Error::GridMismatch);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonPositiveDensity {
                index,
                value: values[index],
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.len).map(|k| f(grid.point(k))).collect();
        Self { grid, values }
    }

    /// Riemann sum `step * sum(values)`.
    pub fn integral(&self) -> f64 {
        self.grid.step * self.values.iter().sum::<f64>()
    }

    pub fn points(&self) -> Vec<f64> {
        self.grid.points()
    }

    /// Convolution with the standard Laplace density, treating grid values
    /// as point masses `value * step`.
    pub fn convolve_laplace(&self) -> DensityGrid {
        let sources: Vec<(f64, f64)> = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| (self.grid.point(k), 0.5 * v * self.grid.step))
            .collect();
        DensityGrid {
            grid: self.grid,
            values: laplace_kernel_sums(&sources, &self.grid.points()),
        }
    }

    pub(crate) fn check_same_grid(&self, other: &DensityGrid) -> Result<()> {
        if self.grid.matches(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covering_reaches_hi() {
        let g = GridSpec::covering(-1.0, 1.0, 0.1).unwrap();
        assert_eq!(g.len, 21);
        assert!((g.hi() - 1.0).abs() < 1e-12);
        let g = GridSpec::covering(0.0, 1.05, 0.1).unwrap();
        assert!(g.hi() >= 1.05);
        assert!(GridSpec::covering(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn laplace_on_grid_integrates_to_one() {
        let g = GridSpec::covering(-45.0, 45.0, 1e-3).unwrap();
        let d = DensityGrid::from_fn(g, crate::model::laplace_pdf);
        assert!((d.integral() - 1.0).abs() < 1e-6);
        let conv = d.convolve_laplace();
        assert!((conv.integral() - 1.0).abs() < 1e-6);
        // Laplace * Laplace = (1 + |t|) exp(-|t|) / 4
        let k = g.len / 2;
        let t = g.point(k);
        assert!((conv.values[k] - (1.0 + t.abs()) * (-t.abs()).exp() / 4.0).abs() < 1e-6);
    }
}
