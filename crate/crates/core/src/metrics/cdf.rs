use super::GridSpec;
use crate::{Error, Result};

const FINAL_MASS_TOL: f64 = 1e-12;

/// Right-continuous piecewise-constant distribution function.
///
/// `values[k]` is the CDF on `[knots[k], knots[k + 1])`; the function is 0
/// left of the first knot and the last value is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCdf {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl StepCdf {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(Error::InvalidDistribution(
                "step CDF needs equally many knots and values".into(),
            ));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidDistribution("knots must be finite and strictly increasing".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0 + FINAL_MASS_TOL).contains(v))
            || values.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::InvalidDistribution("values must be nondecreasing in [0, 1]".into()));
        }
        let last = values[values.len() - 1];
        if (last - 1.0).abs() > FINAL_MASS_TOL {
            return Err(Error::InvalidDistribution(format!("final value {last} is not 1")));
        }
        Ok(Self::from_parts_unchecked(knots, values))
    }

    pub(crate) fn from_parts_unchecked(knots: Vec<f64>, mut values: Vec<f64>) -> Self {
        if let Some(last) = values.last_mut() {
            *last = 1.0;
        }
        Self { knots, values }
    }

    /// CDF sampled at the points of `grid`; only jump points are kept.
    pub fn from_grid(grid: GridSpec, values: &[f64]) -> Result<Self> {
        if values.len() != grid.len {
            return Err(Error::GridMismatch);
        }
        let mut knots = Vec::new();
        let mut kept = Vec::new();
        let mut prev = 0.0;
        for (k, &v) in values.iter().enumerate() {
            if v > prev {
                knots.push(grid.point(k));
                kept.push(v);
                prev = v;
            }
        }
        if knots.is_empty() {
            return Err(Error::InvalidDistribution("grid CDF carries no mass".into()));
        }
        Self::new(knots, kept)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, y: f64) -> f64 {
        let k = self.knots.partition_point(|&t| t <= y);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    /// Left-continuous inverse `inf { y : G(y) >= u }`.
    pub fn quantile(&self, u: f64) -> f64 {
        let k = self.values.partition_point(|&v| v < u).min(self.knots.len() - 1);
        self.knots[k]
    }

    pub fn mean(&self) -> f64 {
        let mut prev = 0.0;
        self.knots
            .iter()
            .zip(&self.values)
            .map(|(&t, &v)| {
                let m = t * (v - prev);
                prev = v;
                m
            })
            .sum()
    }
}

/// `W1 = \int |G1 - G2|`, by a sweep over the merged knots.
pub fn w1_distance(g1: &StepCdf, g2: &StepCdf) -> f64 {
    let (a, b) = (g1, g2);
    let (mut i, mut j) = (0, 0);
    let (mut va, mut vb) = (0.0f64, 0.0f64);
    let mut pos = a.knots[0].min(b.knots[0]);
    let mut area = 0.0;
    while i < a.knots.len() || j < b.knots.len() {
        let next = match (a.knots.get(i), b.knots.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        area += (va - vb).abs() * (next - pos);
        pos = next;
        while i < a.knots.len() && a.knots[i] <= next {
            va = a.values[i];
            i += 1;
        }
        while j < b.knots.len() && b.knots[j] <= next {
            vb = b.values[j];
            j += 1;
        }
    }
    area
}

/// `W_p` through the quantile coupling `(\int_0^1 |G1^{-1} - G2^{-1}|^p)^{1/p}`,
/// exact over the merged probability breakpoints.
pub fn wp_distance(g1: &StepCdf, g2: &StepCdf, p: f64) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::param("p", format!("must be a finite real >= 1, got {p}")));
    }
    let (a, b) = (g1, g2);
    let (mut i, mut j) = (0, 0);
    let mut u_prev = 0.0;
    let mut total = 0.0;
    while i < a.knots.len() && j < b.knots.len() {
        let u = a.values[i].min(b.values[j]);
        let gap = (a.knots[i] - b.knots[j]).abs();
        let cost = if p == 1.0 { gap } else { gap.powf(p) };
        total += cost * (u - u_prev);
        u_prev = u;
        if a.values[i] <= u {
            i += 1;
        }
        if b.values[j] <= u {
            j += 1;
        }
    }
    Ok(if p == 1.0 { total } else { total.powf(1.0 / p) })
}
