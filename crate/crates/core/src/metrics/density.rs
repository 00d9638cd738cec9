use super::DensityGrid;
use crate::model::{laplace_pdf, MixtureDensity, ATOM_MERGE_TOL, TAIL_PAD};
use crate::quadrature::integrate_pieces;
use crate::{Error, Result};

/// Integrand points where `p0` falls below this are dropped in KL and V_k.
pub const KL_FLOOR: f64 = 1e-300;
const QUAD_TOL: f64 = 1e-13;
const MAX_BREAKS: usize = 256;

/// Density-space distances and divergences.
///
/// Implemented in closed form or by piecewise quadrature for
/// [`MixtureDensity`] and by Riemann sums on a shared grid for
/// [`DensityGrid`].
pub trait DensityMetrics {
    fn hellinger(&self, other: &Self) -> Result<f64>;
    fn l1(&self, other: &Self) -> Result<f64>;
    fn l2(&self, other: &Self) -> Result<f64>;
    /// `KL(self || other)`.
    fn kl(&self, other: &Self) -> Result<f64>;
    /// `\int p0 |log(p0 / q)|^k` with `p0 = self`.
    fn v_moment(&self, other: &Self, k: u32) -> Result<f64>;
}

pub fn hellinger<D: DensityMetrics>(p: &D, q: &D) -> Result<f64> {
    p.hellinger(q)
}

pub fn l1_distance<D: DensityMetrics>(p: &D, q: &D) -> Result<f64> {
    p.l1(q)
}

pub fn l2_distance<D: DensityMetrics>(p: &D, q: &D) -> Result<f64> {
    p.l2(q)
}

pub fn kl_divergence<D: DensityMetrics>(p0: &D, q: &D) -> Result<f64> {
    p0.kl(q)
}

pub fn v_moment<D: DensityMetrics>(p0: &D, q: &D, k: u32) -> Result<f64> {
    p0.v_moment(q, k)
}

fn check_order(k: u32) -> Result<()> {
    if k < 2 {
        return Err(Error::param("k", "moment order must be at least 2"));
    }
    Ok(())
}

impl DensityGrid {
    fn nonnegative(&self) -> Result<()> {
        match self.values.iter().position(|&v| v < 0.0) {
            Some(index) => Err(Error::NonPositiveDensity {
                index,
                value: self.values[index],
            }),
            None => Ok(()),
        }
    }

    fn log_ratio_sum(&self, other: &Self, g: impl Fn(f64, f64) -> f64) -> Result<f64> {
        self.check_same_grid(other)?;
        self.nonnegative()?;
        let mut acc = 0.0;
        for (k, (&p, &q)) in self.values.iter().zip(&other.values).enumerate() {
            if p < KL_FLOOR {
                continue;
            }
            if !(q > 0.0) {
                return Err(Error::NonPositiveDensity { index: k, value: q });
            }
            acc += g(p, (p / q).ln());
        }
        Ok(acc * self.grid.step)
    }
}

impl DensityMetrics for DensityGrid {
    fn hellinger(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        self.nonnegative()?;
        other.nonnegative()?;
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(p, q)| (p.sqrt() - q.sqrt()).powi(2))
            .sum();
        Ok((s * self.grid.step).sqrt())
    }

    fn l1(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        let s: f64 = self.values.iter().zip(&other.values).map(|(p, q)| (p - q).abs()).sum();
        Ok(s * self.grid.step)
    }

    fn l2(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        let s: f64 = self.values.iter().zip(&other.values).map(|(p, q)| (p - q).powi(2)).sum();
        Ok((s * self.grid.step).sqrt())
    }

    fn kl(&self, other: &Self) -> Result<f64> {
        self.log_ratio_sum(other, |p, lr| p * lr)
    }

    fn v_moment(&self, other: &Self, k: u32) -> Result<f64> {
        check_order(k)?;
        self.log_ratio_sum(other, |p, lr| p * lr.abs().powi(k as i32))
    }
}

/// `p - q` as one signed Laplace mixture, with shared atoms cancelled.
fn signed_difference(p: &MixtureDensity, q: &MixtureDensity) -> Vec<(f64, f64)> {
    let mut terms: Vec<(f64, f64)> = p
        .mixing()
        .pairs()
        .chain(q.mixing().pairs().map(|(a, w)| (a, -w)))
        .collect();
    terms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(terms.len());
    for (a, w) in terms {
        match merged.last_mut() {
            Some(last) if a - last.0 <= ATOM_MERGE_TOL => last.1 += w,
            _ => merged.push((a, w)),
        }
    }
    merged
}

fn breakpoints(p: &MixtureDensity, q: &MixtureDensity) -> Vec<f64> {
    let mut atoms: Vec<f64> = p.mixing().atoms().iter().chain(q.mixing().atoms()).copied().collect();
    atoms.sort_by(f64::total_cmp);
    atoms.dedup_by(|a, b| (*a - *b).abs() <= ATOM_MERGE_TOL);
    if atoms.len() > MAX_BREAKS {
        let stride = atoms.len().div_ceil(MAX_BREAKS);
        let last = atoms[atoms.len() - 1];
        atoms = atoms.into_iter().step_by(stride).collect();
        if *atoms.last().unwrap() < last {
            atoms.push(last);
        }
    }
    let lo = atoms[0] - TAIL_PAD;
    let hi = atoms[atoms.len() - 1] + TAIL_PAD;
    let mut breaks = vec![lo];
    breaks.extend(atoms);
    breaks.push(hi);
    breaks
}

fn signed_pdf(terms: &[(f64, f64)], x: f64) -> f64 {
    terms.iter().map(|&(a, w)| w * laplace_pdf(x - a)).sum()
}

impl MixtureDensity {
    fn divergence_integral(&self, other: &Self, g: impl Fn(f64, f64) -> f64) -> f64 {
        let breaks = breakpoints(self, other);
        integrate_pieces(
            |x| {
                let p = self.pdf(x);
                if p < KL_FLOOR {
                    return 0.0;
                }
                g(p, (p / other.pdf(x)).ln())
            },
            &breaks,
            QUAD_TOL,
        )
    }
}

impl DensityMetrics for MixtureDensity {
    fn hellinger(&self, other: &Self) -> Result<f64> {
        let diff = signed_difference(self, other);
        let breaks = breakpoints(self, other);
        let h2 = integrate_pieces(
            |x| {
                let d = signed_pdf(&diff, x);
                if d == 0.0 {
                    return 0.0;
                }
                let s = self.pdf(x).sqrt() + other.pdf(x).sqrt();
                (d / s).powi(2)
            },
            &breaks,
            QUAD_TOL,
        );
        Ok(h2.max(0.0).sqrt())
    }

    fn l1(&self, other: &Self) -> Result<f64> {
        let diff = signed_difference(self, other);
        let breaks = breakpoints(self, other);
        Ok(integrate_pieces(|x| signed_pdf(&diff, x).abs(), &breaks, QUAD_TOL))
    }

    /// Closed form: `\int f(x - a) f(x - b) dx = (1 + |a - b|) exp(-|a - b|) / 4`.
    fn l2(&self, other: &Self) -> Result<f64> {
        let diff = signed_difference(self, other);
        let mut s = 0.0;
        for (i, &(a, wa)) in diff.iter().enumerate() {
            s += wa * wa * 0.25;
            for &(b, wb) in &diff[i + 1..] {
                let r = (a - b).abs();
                s += 2.0 * wa * wb * (1.0 + r) * (-r).exp() * 0.25;
            }
        }
        Ok(s.max(0.0).sqrt())
    }

    fn kl(&self, other: &Self) -> Result<f64> {
        Ok(self.divergence_integral(other, |p, lr| p * lr).max(0.0))
    }

    fn v_moment(&self, other: &Self, k: u32) -> Result<f64> {
        check_order(k)?;
        Ok(self.divergence_integral(other, |p, lr| p * lr.abs().powi(k as i32)))
    }
}
