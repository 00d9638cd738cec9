//! Laplace kernel, discrete mixing distributions, mixture densities and
//! exact sampling from ground-truth mixing laws.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::StepCdf;
use crate::rng::{open01, stream};
use crate::{Error, Result};

/// Atoms closer than this are merged at construction.
pub const ATOM_MERGE_TOL: f64 = 1e-12;
/// Tolerance on the total mass of a [`DiscreteDistribution`].
pub const MASS_TOL: f64 = 1e-12;
/// Padding beyond the atom range used for whole-line quadrature.
pub const TAIL_PAD: f64 = 40.0;
/// Maximum number of atoms used to discretize a continuous ground truth.
pub const MAX_DISCRETIZED_ATOMS: usize = 10_000;

/// Standard Laplace density `exp(-|z|) / 2`.
#[inline]
pub fn laplace_pdf(z: f64) -> f64 {
    0.5 * (-z.abs()).exp()
}

/// Standard Laplace distribution function.
#[inline]
pub fn laplace_cdf(z: f64) -> f64 {
    if z < 0.0 {
        0.5 * z.exp()
    } else {
        1.0 - 0.5 * (-z).exp()
    }
}

/// Inverse of [`laplace_cdf`] on (0, 1).
#[inline]
pub fn laplace_quantile(u: f64) -> f64 {
    if u < 0.5 {
        (2.0 * u).ln()
    } else {
        -(2.0 * (1.0 - u)).ln()
    }
}

/// Computes `sum_j w_j exp(-|t - s_j|)` at every target `t`.
///
/// Both `sources` (location, weight) and `targets` must be sorted by
/// location. Runs in `O(sources + targets)` with two exponential sweeps,
/// which is exact up to rounding because the Laplace kernel factorizes on
/// each side of the target.
pub fn laplace_kernel_sums(sources: &[(f64, f64)], targets: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; targets.len()];
    if sources.is_empty() {
        return out;
    }
    // Sources at or left of each target.
    let mut acc = 0.0;
    let mut pos = sources[0].0;
    let mut j = 0;
    for (k, &t) in targets.iter().enumerate() {
        while j < sources.len() && sources[j].0 <= t {
            let (s, w) = sources[j];
            acc = acc * (-(s - pos)).exp() + w;
            pos = s;
            j += 1;
        }
        if j > 0 {
            out[k] = acc * (-(t - pos)).exp();
        }
    }
    // Sources strictly right of each target.
    let mut acc = 0.0;
    let mut pos = sources[sources.len() - 1].0;
    let mut j = sources.len();
    for (k, &t) in targets.iter().enumerate().rev() {
        while j > 0 && sources[j - 1].0 > t {
            let (s, w) = sources[j - 1];
            acc = acc * (-(pos - s)).exp() + w;
            pos = s;
            j -= 1;
        }
        if j < sources.len() {
            out[k] += acc * (-(pos - t)).exp();
        }
    }
    out
}

/// A probability distribution with finitely many atoms on the real line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteDistribution {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    /// Builds a distribution from atoms and weights summing to one.
    ///
    /// Atoms are sorted, atoms within [`ATOM_MERGE_TOL`] merged and
    /// zero-weight atoms dropped.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let d = Self::build(atoms, weights)?;
        let total: f64 = d.weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(d)
    }

    /// Like [`new`](Self::new) but rescales the weights to unit mass.
    pub fn from_unnormalized(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut d = Self::build(atoms, weights)?;
        let total: f64 = d.weights.iter().sum();
        d.weights.iter_mut().for_each(|w| *w /= total);
        Ok(d)
    }

    pub fn dirac(location: f64) -> Self {
        Self {
            atoms: vec![location],
            weights: vec![1.0],
        }
    }

    fn build(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let mut pairs = Vec::with_capacity(atoms.len());
        for (a, w) in atoms.into_iter().zip(weights) {
            if !a.is_finite() {
                return Err(Error::InvalidDistribution(format!("atom {a} is not finite")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidDistribution(format!("weight {w} is invalid")));
            }
            if w > 0.0 {
                pairs.push((a, w));
            }
        }
        if pairs.is_empty() {
            return Err(Error::InvalidDistribution("no atom with positive weight".into()));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut atoms: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut weights: Vec<f64> = Vec::with_capacity(pairs.len());
        for (a, w) in pairs {
            match atoms.last() {
                Some(&last) if a - last <= ATOM_MERGE_TOL => *weights.last_mut().unwrap() += w,
                _ => {
                    atoms.push(a);
                    weights.push(w);
                }
            }
        }
        Ok(Self { atoms, weights })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// (atom, weight) pairs in increasing atom order.
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.atoms.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn min_atom(&self) -> f64 {
        self.atoms[0]
    }

    pub fn max_atom(&self) -> f64 {
        self.atoms[self.atoms.len() - 1]
    }

    pub fn mean(&self) -> f64 {
        self.pairs().map(|(a, w)| a * w).sum()
    }

    /// Right-continuous distribution function.
    pub fn cdf(&self, y: f64) -> f64 {
        let k = self.atoms.partition_point(|&a| a <= y);
        self.weights[..k].iter().sum::<f64>().min(1.0)
    }

    /// Left-continuous inverse `inf { y : G(y) >= u }` for `u` in (0, 1].
    pub fn quantile(&self, u: f64) -> f64 {
        let mut acc = 0.0;
        for (a, w) in self.pairs() {
            acc += w;
            if acc >= u {
                return a;
            }
        }
        self.max_atom()
    }

    pub fn to_step_cdf(&self) -> StepCdf {
        let mut acc = 0.0;
        let values: Vec<f64> = self
            .weights
            .iter()
            .map(|w| {
                acc += w;
                acc.min(1.0)
            })
            .collect();
        StepCdf::from_parts_unchecked(self.atoms.clone(), values)
    }

    /// Reflection `y -> -y`.
    pub fn reflect(&self) -> Self {
        Self {
            atoms: self.atoms.iter().rev().map(|a| -a).collect(),
            weights: self.weights.iter().rev().copied().collect(),
        }
    }

    /// Translation `y -> y + c`.
    pub fn shift(&self, c: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|a| a + c).collect(),
            weights: self.weights.clone(),
        }
    }
}

/// Laplace location mixture `p_G(x) = sum_j w_j f(x - y_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensity {
    mixing: DiscreteDistribution,
}

impl MixtureDensity {
    pub fn new(mixing: DiscreteDistribution) -> Self {
        Self { mixing }
    }

    pub fn mixing(&self) -> &DiscreteDistribution {
        &self.mixing
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.mixing.pairs().map(|(a, w)| w * laplace_pdf(x - a)).sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.mixing
            .pairs()
            .map(|(a, w)| w * laplace_cdf(x - a))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Evaluates the density at sorted points in linear time.
    pub fn pdf_sorted(&self, xs: &[f64]) -> Vec<f64> {
        let sources: Vec<(f64, f64)> = self.mixing.pairs().map(|(a, w)| (a, 0.5 * w)).collect();
        laplace_kernel_sums(&sources, xs)
    }

    /// Whole-line integration window: atom range padded by [`TAIL_PAD`].
    pub fn support_window(&self) -> (f64, f64) {
        (self.mixing.min_atom() - TAIL_PAD, self.mixing.max_atom() + TAIL_PAD)
    }
}

/// `sum_i log p_G(x_i)`.
pub fn log_likelihood(m: &MixtureDensity, x: &[f64]) -> f64 {
    if x.windows(2).all(|w| w[0] <= w[1]) {
        m.pdf_sorted(x).iter().map(|p| p.ln()).sum()
    } else {
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        m.pdf_sorted(&sorted).iter().map(|p| p.ln()).sum()
    }
}

/// Ground-truth mixing-distribution families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "kebab-case")]
pub enum Family {
    FiniteDiscrete { atoms: Vec<f64>, weights: Vec<f64> },
    /// Symmetric exponential law with density `(c/2) exp(-c|y|)`.
    ExponentialTail { rate: f64 },
    /// Uniform law on `[-a, a]`.
    CompactUniformDiscretized { half_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    #[serde(flatten)]
    pub family: Family,
    pub seed: u64,
}

impl GroundTruthSpec {
    pub fn finite(atoms: Vec<f64>, weights: Vec<f64>, seed: u64) -> Self {
        Self {
            family: Family::FiniteDiscrete { atoms, weights },
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            family: self.family.clone(),
            seed,
        }
    }

    /// Exponential tail rate `c0` with `G0([-T,T]^c) <= exp(-c0 T)`, when
    /// the family has unbounded support.
    pub fn tail_rate(&self) -> Option<f64> {
        match self.family {
            Family::ExponentialTail { rate } => Some(rate),
            _ => None,
        }
    }

    /// The mixing distribution, discretized for continuous families.
    pub fn mixing(&self) -> Result<DiscreteDistribution> {
        match &self.family {
            Family::FiniteDiscrete { atoms, weights } => {
                DiscreteDistribution::new(atoms.clone(), weights.clone())
            }
            Family::ExponentialTail { rate } => {
                let c = *rate;
                if !(c > 0.0) || !c.is_finite() {
                    return Err(Error::param("rate", "must be positive and finite"));
                }
                // exp(-24) < 1e-10
                let t = 24.0 / c;
                let k = MAX_DISCRETIZED_ATOMS;
                let width = 2.0 * t / k as f64;
                let cdf = |y: f64| laplace_cdf(c * y);
                let (atoms, weights): (Vec<f64>, Vec<f64>) = (0..k)
                    .map(|i| {
                        let lo = -t + i as f64 * width;
                        (lo + 0.5 * width, cdf(lo + width) - cdf(lo))
                    })
                    .unzip();
                DiscreteDistribution::from_unnormalized(atoms, weights)
            }
            Family::CompactUniformDiscretized { half_width } => {
                let a = *half_width;
                if !(a > 0.0) || !a.is_finite() {
                    return Err(Error::param("half_width", "must be positive and finite"));
                }
                let k = MAX_DISCRETIZED_ATOMS;
                let width = 2.0 * a / k as f64;
                let atoms = (0..k).map(|i| -a + (i as f64 + 0.5) * width).collect();
                DiscreteDistribution::from_unnormalized(atoms, vec![1.0; k])
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Observations with the latent signal and noise retained for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    pub seed: u64,
}

impl Sample {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        match (&self.y, &self.z) {
            (Some(y), Some(z)) => {
                out.write_record(["x", "y", "z"])?;
                for i in 0..self.x.len() {
                    out.write_record([self.x[i].to_string(), y[i].to_string(), z[i].to_string()])?;
                }
            }
            _ => {
                out.write_record(["x"])?;
                for v in &self.x {
                    out.write_record([v.to_string()])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads the `x` column of a CSV file with a header row.
pub fn read_observations<R: Read>(r: R) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(r);
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h.trim() == "x")
        .ok_or_else(|| Error::param("data", "missing `x` column"))?;
    let mut x = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = rec.get(col).unwrap_or("").trim();
        let v: f64 = field
            .parse()
            .map_err(|_| Error::param("data", format!("cannot parse `{field}` as a number")))?;
        x.push(v);
    }
    Ok(x)
}

pub fn read_observations_file(path: &Path) -> Result<Vec<f64>> {
    read_observations(std::fs::File::open(path)?)
}

/// Draws `n` observations `x = y + z` with `y ~ G0` and standard Laplace `z`.
///
/// Latents come from the (discretized) ground truth by inverse CDF, noise
/// by the Laplace inverse CDF; the stream is keyed by `spec.seed`.
pub fn sample(spec: &GroundTruthSpec, n: usize) -> Result<Sample> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    let g0 = spec.mixing()?;
    let mut cum = Vec::with_capacity(g0.len());
    let mut acc = 0.0;
    for &w in g0.weights() {
        acc += w;
        cum.push(acc);
    }
    let last = cum.len() - 1;
    let mut rng = stream(spec.seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let u = open01(&mut rng) * acc;
        let k = cum.partition_point(|&c| c < u).min(last);
        let yi = g0.atoms()[k];
        let zi = laplace_quantile(open01(&mut rng));
        x.push(yi + zi);
        y.push(yi);
        z.push(zi);
    }
    Ok(Sample {
        x,
        y: Some(y),
        z: Some(z),
        seed: spec.seed,
    })
}
