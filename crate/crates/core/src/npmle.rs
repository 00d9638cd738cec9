//! Nonparametric maximum-likelihood estimation of the mixing distribution.
//!
//! The likelihood is maximized over mixing distributions supported on a
//! fine candidate grid. The gradient function
//! `D_G(y) = sum_i f(x_i - y) / p_G(x_i) - n` selects new atoms, a
//! constrained Newton step (with EM as fallback) updates the weights, and
//! `sup_y D_G(y) <= grad_tol` certifies optimality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{laplace_kernel_sums, laplace_pdf, sample, DiscreteDistribution, GroundTruthSpec};
use crate::rng::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Candidate locations extend this far beyond the data range.
    pub grid_pad: f64,
    pub grid_step: f64,
    /// Relative log-likelihood change that ends an EM round.
    pub em_tol: f64,
    /// Certificate threshold on `sup_y D_G(y)`.
    pub grad_tol: f64,
    /// Cap on EM steps plus support updates.
    pub max_iter: usize,
    pub prune_weight: f64,
}

/// Optional overrides of the data-dependent defaults, as read from JSON.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    pub grid_pad: Option<f64>,
    pub grid_step: Option<f64>,
    pub em_tol: Option<f64>,
    pub grad_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub prune_weight: Option<f64>,
}

impl SolverConfig {
    /// Defaults for a data set: step `min(0.01, range / 2000)` and
    /// `grad_tol = 1e-6 n`.
    pub fn for_data(x: &[f64]) -> Self {
        let (lo, hi) = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = hi - lo;
        let grid_step = if range > 0.0 { (range / 2000.0).min(0.01) } else { 0.01 };
        Self {
            grid_pad: 10.0,
            grid_step,
            em_tol: 1e-10,
            grad_tol: (1e-6 * x.len() as f64).max(1e-10),
            max_iter: 100_000,
            prune_weight: 1e-8,
        }
    }

    pub fn with_overrides(mut self, o: &SolverOverrides) -> Self {
        self.grid_pad = o.grid_pad.unwrap_or(self.grid_pad);
        self.grid_step = o.grid_step.unwrap_or(self.grid_step);
        self.em_tol = o.em_tol.unwrap_or(self.em_tol);
        self.grad_tol = o.grad_tol.unwrap_or(self.grad_tol);
        self.max_iter = o.max_iter.unwrap_or(self.max_iter);
        self.prune_weight = o.prune_weight.unwrap_or(self.prune_weight);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_pad", self.grid_pad),
            ("grid_step", self.grid_step),
            ("em_tol", self.em_tol),
            ("grad_tol", self.grad_tol),
            ("prune_weight", self.prune_weight),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        if self.grad_tol < 1e-10 {
            return Err(Error::param("grad_tol", "must be at least 1e-10"));
        }
        if self.max_iter == 0 {
            return Err(Error::param("max_iter", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NpmleResult {
    #[serde(skip)]
    pub g_hat: DiscreteDistribution,
    pub loglik: f64,
    /// `sup` of the gradient function over the candidate grid.
    pub gradient_sup: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after every accepted update.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Serialize)]
struct NpmleJson<'a> {
    atoms: &'a [f64],
    weights: &'a [f64],
    loglik: f64,
    gradient_sup: f64,
    iterations: usize,
    converged: bool,
}

impl NpmleResult {
    /// `{atoms, weights, loglik, gradient_sup, iterations, converged}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NpmleJson {
            atoms: self.g_hat.atoms(),
            weights: self.g_hat.weights(),
            loglik: self.loglik,
            gradient_sup: self.gradient_sup,
            iterations: self.iterations,
            converged: self.converged,
        })?)
    }
}

/// Candidate locations: symmetric about the midrange, `grid_step` apart,
/// covering the data range padded by `grid_pad` on both sides.
pub fn candidate_grid(x: &[f64], cfg: &SolverConfig) -> Vec<f64> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo) + cfg.grid_pad;
    let k = (half / cfg.grid_step - 1e-9).ceil() as i64;
    (-k..=k).map(|i| center + i as f64 * cfg.grid_step).collect()
}

/// `D_G(y) = sum_i f(x_i - y) / p_G(x_i) - n`.
pub fn gradient_function(g: &DiscreteDistribution, x: &[f64], y: f64) -> f64 {
    x.iter()
        .map(|&xi| {
            let p: f64 = g.pairs().map(|(a, w)| w * laplace_pdf(xi - a)).sum();
            laplace_pdf(xi - y) / p
        })
        .sum::<f64>()
        - x.len() as f64
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

/// Working state over a sorted sample and a fixed candidate grid.
struct Solver<'a> {
    xs: &'a [f64],
    grid: &'a [f64],
    /// Active atoms as sorted grid indices with their weights.
    atoms: Vec<usize>,
    weights: Vec<f64>,
    dens: Vec<f64>,
    loglik: f64,
}

impl<'a> Solver<'a> {
    fn new(xs: &'a [f64], grid: &'a [f64], start: usize) -> Self {
        let mut s = Self {
            xs,
            grid,
            atoms: vec![start],
            weights: vec![1.0],
            dens: Vec::new(),
            loglik: 0.0,
        };
        s.refresh();
        s
    }

    fn n(&self) -> f64 {
        self.xs.len() as f64
    }

    fn refresh(&mut self) {
        let sources: Vec<(f64, f64)> = self
            .atoms
            .iter()
            .zip(&self.weights)
            .map(|(&a, &w)| (self.grid[a], 0.5 * w))
            .collect();
        self.dens = laplace_kernel_sums(&sources, self.xs);
        self.loglik = self.dens.iter().map(|p| p.ln()).sum();
    }

    /// `D_G` at sorted locations.
    fn gradient_at(&self, ys: &[f64]) -> Vec<f64> {
        let sources: Vec<(f64, f64)> = self.xs.iter().zip(&self.dens).map(|(&x, &p)| (x, 0.5 / p)).collect();
        let n = self.n();
        laplace_kernel_sums(&sources, ys).into_iter().map(|s| s - n).collect()
    }

    fn atom_gradients(&self) -> Vec<f64> {
        let ys: Vec<f64> = self.atoms.iter().map(|&a| self.grid[a]).collect();
        self.gradient_at(&ys)
    }

    /// One EM step; returns the largest `|D_G|` over the atoms before it.
    fn em_step(&mut self) -> f64 {
        let grads = self.atom_gradients();
        let n = self.n();
        let mut worst: f64 = 0.0;
        for (w, d) in self.weights.iter_mut().zip(&grads) {
            worst = worst.max(d.abs());
            *w *= 1.0 + d / n;
        }
        let total: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= total);
        self.refresh();
        worst
    }

    /// Constrained Newton step on the active weights.
    ///
    /// With `A_ij = f(x_i - y_j) / p(x_i)`, the quadratic model of
    /// `sum_i log p_v(x_i) - n sum_j v_j` over `v >= 0` is maximized by NNLS;
    /// the normalized solution is approached by backtracking until the
    /// likelihood increases. Returns false when no step helps.
    fn newton_step(&mut self) -> bool {
        let k = self.atoms.len();
        let n = self.xs.len();
        let ys: Vec<f64> = self.atoms.iter().map(|&a| self.grid[a]).collect();
        let mut q = vec![0.0; k * k];
        let mut c = vec![0.0; k];
        let mut row = vec![0.0; k];
        for i in 0..n {
            let inv = 1.0 / self.dens[i];
            for (j, &y) in ys.iter().enumerate() {
                row[j] = laplace_pdf(self.xs[i] - y) * inv;
            }
            for a in 0..k {
                c[a] += 2.0 * row[a];
                for b in a..k {
                    q[a * k + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            c[a] -= n as f64;
            for b in 0..a {
                q[a * k + b] = q[b * k + a];
            }
        }
        let v = nnls_normal(&q, &c, k);
        let total: f64 = v.iter().sum();
        if !(total > 0.0) {
            return false;
        }
        let target: Vec<f64> = v.iter().map(|x| x / total).collect();
        let (atoms, weights, dens, loglik) = (self.atoms.clone(), self.weights.clone(), self.dens.clone(), self.loglik);
        let mut step = 1.0;
        while step > 1e-10 {
            self.weights = weights
                .iter()
                .zip(&target)
                .map(|(w, t)| w + step * (t - w))
                .collect();
            let keep: Vec<bool> = self.weights.iter().map(|&w| w > 0.0).collect();
            self.retain(&keep);
            self.refresh();
            if self.loglik > loglik {
                return true;
            }
            self.atoms = atoms.clone();
            step *= 0.5;
        }
        (self.atoms, self.weights, self.dens, self.loglik) = (atoms, weights, dens, loglik);
        false
    }

    /// Moves mass toward grid point `k`: `G <- (1 - lambda) G + lambda delta_y`
    /// with the likelihood-maximizing `lambda`.
    fn vertex_step(&mut self, k: usize) {
        let y = self.grid[k];
        let fy: Vec<f64> = self.xs.iter().map(|&x| laplace_pdf(x - y)).collect();
        let slope = |lambda: f64| -> f64 {
            self.dens
                .iter()
                .zip(&fy)
                .map(|(&p, &f)| (f - p) / ((1.0 - lambda) * p + lambda * f))
                .sum()
        };
        let lambda = if slope(1.0) >= 0.0 {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        if lambda <= 0.0 {
            return;
        }
        self.weights.iter_mut().for_each(|w| *w *= 1.0 - lambda);
        match self.atoms.binary_search(&k) {
            Ok(pos) => self.weights[pos] += lambda,
            Err(pos) => {
                self.atoms.insert(pos, k);
                self.weights.insert(pos, lambda);
            }
        }
        let keep: Vec<bool> = self.weights.iter().map(|&w| w > 0.0).collect();
        self.retain(&keep);
        self.refresh();
    }

    fn add_candidates(&mut self, ks: &[usize]) {
        for &k in ks {
            if let Err(pos) = self.atoms.binary_search(&k) {
                self.atoms.insert(pos, k);
                self.weights.insert(pos, 0.0);
            }
        }
    }

    fn drop_empty(&mut self) {
        let keep: Vec<bool> = self.weights.iter().map(|&w| w > 0.0).collect();
        self.retain(&keep);
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.atoms.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.weights.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }

    /// Drops atoms lighter than `threshold` unless that lowers the likelihood.
    fn prune(&mut self, threshold: f64) -> bool {
        if self.atoms.len() < 2 || self.weights.iter().all(|&w| w >= threshold) {
            return false;
        }
        let saved = (self.atoms.clone(), self.weights.clone(), self.dens.clone(), self.loglik);
        let keep: Vec<bool> = self.weights.iter().map(|&w| w >= threshold).collect();
        if !keep.iter().any(|&k| k) {
            return false;
        }
        self.retain(&keep);
        let total: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= total);
        self.refresh();
        if self.loglik < saved.3 {
            (self.atoms, self.weights, self.dens, self.loglik) = saved;
            return false;
        }
        true
    }
}

/// Lawson-Hanson NNLS in normal-equation form: minimizes
/// `v' Q v / 2 - c' v` over `v >= 0` for a `k x k` Gram matrix `Q`.
fn nnls_normal(q: &[f64], c: &[f64], k: usize) -> Vec<f64> {
    let ridge = 1e-12 * (0..k).map(|i| q[i * k + i]).fold(0.0, f64::max).max(1e-300);
    let cv = c;
    let mut v = vec![0.0; k];
    let mut passive = vec![false; k];
    let grad = |v: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|a| cv[a] - (0..k).map(|b| q[a * k + b] * v[b]).sum::<f64>())
            .collect()
    };
    let scale = cv.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    for _outer in 0..(3 * k + 10) {
        let w = grad(&v);
        let pick = (0..k)
            .filter(|&j| !passive[j])
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        match pick {
            Some(j) if w[j] > 1e-14 * scale => passive[j] = true,
            _ => break,
        }
        for _inner in 0..(3 * k + 10) {
            let idx: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
            let s = solve_spd(q, &cv, &idx, k, ridge);
            if idx.iter().zip(&s).all(|(_, &x)| x > 0.0) {
                v.iter_mut().for_each(|x| *x = 0.0);
                for (&j, &x) in idx.iter().zip(&s) {
                    v[j] = x;
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (&j, &x) in idx.iter().zip(&s) {
                if x <= 0.0 {
                    alpha = alpha.min(v[j] / (v[j] - x));
                }
            }
            for (&j, &x) in idx.iter().zip(&s) {
                v[j] += alpha * (x - v[j]);
                if v[j] <= 1e-15 {
                    v[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    v
}

/// Solves `Q[idx, idx] s = c[idx]` by Cholesky with a small ridge.
fn solve_spd(q: &[f64], c: &[f64], idx: &[usize], k: usize, ridge: f64) -> Vec<f64> {
    let m = idx.len();
    let mut l = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..=a {
            let mut sum = q[idx[a] * k + idx[b]];
            if a == b {
                sum += ridge;
            }
            for t in 0..b {
                sum -= l[a * m + t] * l[b * m + t];
            }
            l[a * m + b] = if a == b { sum.max(ridge).sqrt() } else { sum / l[b * m + b] };
        }
    }
    let mut y = vec![0.0; m];
    for a in 0..m {
        let mut sum = c[idx[a]];
        for t in 0..a {
            sum -= l[a * m + t] * y[t];
        }
        y[a] = sum / l[a * m + a];
    }
    let mut x = vec![0.0; m];
    for a in (0..m).rev() {
        let mut sum = y[a];
        for t in a + 1..m {
            sum -= l[t * m + a] * x[t];
        }
        x[a] = sum / l[a * m + a];
    }
    x
}

/// Computes the NPMLE of the mixing distribution.
const INNER_STEPS: usize = 50;

pub fn fit(x: &[f64], cfg: &SolverConfig) -> Result<NpmleResult> {
    check_data(x)?;
    cfg.validate()?;
    let mut xs = x.to_vec();
    xs.sort_by(f64::total_cmp);
    let grid = candidate_grid(&xs, cfg);
    let median = xs[(xs.len() - 1) / 2];
    let start = grid.partition_point(|&y| y < median).min(grid.len() - 1);
    let start = if start > 0 && (median - grid[start - 1]) <= (grid[start] - median) {
        start - 1
    } else {
        start
    };

    let mut s = Solver::new(&xs, &grid, start);
    let mut trace = vec![s.loglik];
    let mut iterations = 0;
    let (gradient_sup, converged) = loop {
        let d = s.gradient_at(&grid);
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
        for (k, &v) in d.iter().enumerate() {
            if v > best {
                best = v;
                arg = k;
            }
        }
        if best <= cfg.grad_tol {
            break (best, true);
        }
        if iterations >= cfg.max_iter {
            break (best, false);
        }
        // Every local maximum of the gradient above tolerance becomes a
        // zero-weight candidate; the Newton step decides which ones get mass.
        let peaks: Vec<usize> = (0..d.len())
            .filter(|&k| {
                d[k] > cfg.grad_tol
                    && (k == 0 || d[k] >= d[k - 1])
                    && (k + 1 == d.len() || d[k] > d[k + 1])
            })
            .collect();
        s.add_candidates(&peaks);
        if !s.newton_step() {
            s.drop_empty();
            s.vertex_step(arg);
        }
        iterations += 1;
        trace.push(s.loglik);
        for _ in 0..INNER_STEPS {
            if iterations >= cfg.max_iter {
                break;
            }
            let worst = s.atom_gradients().iter().fold(0.0f64, |m, d| m.max(d.abs()));
            if worst <= cfg.grad_tol {
                break;
            }
            let before = s.loglik;
            if !s.newton_step() {
                s.em_step();
            }
            iterations += 1;
            trace.push(s.loglik);
            if s.loglik - before <= cfg.em_tol * before.abs().max(1.0) {
                break;
            }
        }
        if s.prune(cfg.prune_weight) {
            trace.push(s.loglik);
        }
    };

    let g_hat = DiscreteDistribution::from_unnormalized(
        s.atoms.iter().map(|&a| grid[a]).collect(),
        s.weights.clone(),
    )?;
    Ok(NpmleResult {
        g_hat,
        loglik: s.loglik,
        gradient_sup,
        iterations,
        converged,
        trace,
    })
}

/// Moment generating function `sum_j w_j exp(s y_j)`.
pub fn mgf(g: &DiscreteDistribution, s: f64) -> f64 {
    if s == 0.0 {
        return 1.0;
    }
    g.pairs().map(|(a, w)| w * (s * a).exp()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MgfRow {
    pub s: f64,
    /// Monte Carlo mean of `M_{G_n}(s)` over replications.
    pub mean: f64,
    /// Standard error of `mean`; absent with a single replication.
    pub se: Option<f64>,
    pub truth: f64,
    pub gap: f64,
}

/// Monte Carlo estimate of `E[M_{G_n}(s)]` next to `M_{G0}(s)` for each `s`.
pub fn mgf_bias_diagnostic(
    spec: &GroundTruthSpec,
    s_grid: &[f64],
    n: usize,
    reps: usize,
) -> Result<Vec<MgfRow>> {
    if let Some(&s) = s_grid.iter().find(|s| !(s.abs() < 1.0)) {
        return Err(Error::param("s", format!("{s} lies outside (-1, 1)")));
    }
    if reps == 0 {
        return Err(Error::param("reps", "must be at least 1"));
    }
    let g0 = spec.mixing()?;
    let fits: Vec<DiscreteDistribution> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let data = sample(&spec.with_seed(derive_seed(spec.seed, &[rep as u64])), n)?;
            Ok(fit(&data.x, &SolverConfig::for_data(&data.x))?.g_hat)
        })
        .collect::<Result<_>>()?;
    Ok(s_grid
        .iter()
        .map(|&s| {
            let vals: Vec<f64> = fits.iter().map(|g| mgf(g, s)).collect();
            let mean = vals.iter().sum::<f64>() / reps as f64;
            let se = (reps > 1).then(|| {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
                (var / reps as f64).sqrt()
            });
            let truth = mgf(&g0, s);
            MgfRow {
                s,
                mean,
                se,
                truth,
                gap: mean - truth,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{log_likelihood, MixtureDensity};
    use crate::rng::{open01, stream};

    #[test]
    fn gradient_function_examples() {
        let g = DiscreteDistribution::dirac(0.0);
        assert_eq!(gradient_function(&g, &[0.0], 0.0), 0.0);
        let d = gradient_function(&g, &[0.0], 2.0);
        assert!((d - ((-2.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_directional_derivative() {
        let mut rng = stream(4);
        let g = DiscreteDistribution::from_unnormalized(vec![-1.0, 0.5, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let x: Vec<f64> = (0..10).map(|_| 6.0 * open01(&mut rng) - 3.0).collect();
        let ll = |g: &DiscreteDistribution| log_likelihood(&MixtureDensity::new(g.clone()), &x);
        for y in [-2.0, 0.1, 1.3] {
            let eps = 1e-6;
            let mut atoms = g.atoms().to_vec();
            let mut weights: Vec<f64> = g.weights().iter().map(|w| w * (1.0 - eps)).collect();
            atoms.push(y);
            weights.push(eps);
            let moved = DiscreteDistribution::new(atoms, weights).unwrap();
            let fd = (ll(&moved) - ll(&g)) / eps;
            assert!((fd - gradient_function(&g, &x, y)).abs() < 1e-4, "y={y}");
        }
    }

    #[test]
    fn fit_single_point() {
        let r = fit(&[1.7], &SolverConfig::for_data(&[1.7])).unwrap();
        assert!(r.converged);
        assert_eq!(r.g_hat.len(), 1);
        assert!((r.g_hat.atoms()[0] - 1.7).abs() < 1e-12);
        assert!((r.loglik - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_bad_data() {
        let cfg = SolverConfig::for_data(&[0.0]);
        assert!(matches!(fit(&[], &cfg), Err(Error::EmptyData)));
        assert!(matches!(fit(&[0.0, f64::NAN], &cfg), Err(Error::NonFiniteData { index: 1 })));
        let mut bad = cfg;
        bad.grad_tol = 1e-12;
        assert!(fit(&[0.0], &bad).is_err());
    }

    #[test]
    fn fit_is_reflection_symmetric() {
        let x = [-1.3, 1.3];
        let cfg = SolverConfig::for_data(&x);
        let r = fit(&x, &cfg).unwrap();
        let reflected: Vec<f64> = x.iter().map(|v| -v).collect();
        let rr = fit(&reflected, &cfg).unwrap();
        assert!((r.loglik - rr.loglik).abs() < 1e-9);
        // The reflected estimate fits the original data equally well.
        let ll = log_likelihood(&MixtureDensity::new(rr.g_hat.reflect()), &x);
        assert!((ll - r.loglik).abs() < 1e-9);
        let m = r.g_hat.mean();
        assert!(m.abs() < 1e-3, "mean {m}");
    }

    #[test]
    fn fit_certificate_on_point_mass_truth() {
        let spec = GroundTruthSpec::finite(vec![0.0], vec![1.0], 17);
        let data = sample(&spec, 50).unwrap();
        let cfg = SolverConfig::for_data(&data.x);
        let r = fit(&data.x, &cfg).unwrap();
        assert!(r.converged);
        assert!(r.g_hat.len() <= 50);
        assert!(r.gradient_sup <= cfg.grad_tol);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
        for &a in r.g_hat.atoms() {
            assert!(gradient_function(&r.g_hat, &data.x, a).abs() <= 10.0 * cfg.grad_tol);
        }
    }

    #[test]
    fn mgf_examples() {
        let g = DiscreteDistribution::dirac(0.0);
        assert_eq!(mgf(&g, 0.7), 1.0);
        let h = DiscreteDistribution::new(vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(mgf(&h, 0.0), 1.0);
        assert!((mgf(&h, 0.5) - 0.5f64.cosh()).abs() < 1e-15);
    }

    #[test]
    fn mgf_diagnostic_contracts() {
        let spec = GroundTruthSpec::finite(vec![0.0], vec![1.0], 3);
        assert!(mgf_bias_diagnostic(&spec, &[1.0], 10, 2).is_err());
        let rows = mgf_bias_diagnostic(&spec, &[0.0, 0.5], 30, 1).unwrap();
        assert_eq!(rows[0].mean, 1.0);
        assert!(rows[0].se.is_none());
        let rows = mgf_bias_diagnostic(&spec, &[0.0], 30, 3).unwrap();
        assert_eq!(rows[0].mean, 1.0);
        assert_eq!(rows[0].se, Some(0.0));
    }

    #[test]
    fn json_fields() {
        let r = fit(&[0.0, 1.0], &SolverConfig::for_data(&[0.0, 1.0])).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in ["atoms", "weights", "loglik", "gradient_sup", "iterations", "converged"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn grid_loglik(x: &[f64], grid: &[f64], w: &[f64]) -> f64 {
        x.iter()
            .map(|&xi| grid.iter().zip(w).map(|(&y, &wj)| wj * laplace_pdf(xi - y)).sum::<f64>().ln())
            .sum()
    }

    /// Multiplicative EM on every grid point from uniform weights.
    fn em_oracle(x: &[f64], grid: &[f64]) -> f64 {
        let m = grid.len();
        let mut w = vec![1.0 / m as f64; m];
        for _ in 0..200_000 {
            let p: Vec<f64> = x
                .iter()
                .map(|&xi| grid.iter().zip(&w).map(|(&y, &wj)| wj * laplace_pdf(xi - y)).sum())
                .collect();
            for (j, wj) in w.iter_mut().enumerate() {
                let r: f64 = x.iter().zip(&p).map(|(&xi, &pi)| laplace_pdf(xi - grid[j]) / pi).sum();
                *wj *= r / x.len() as f64;
            }
        }
        grid_loglik(x, grid, &w)
    }

    /// Exhaustive search over atom pairs and a 0.01 weight grid, refined by
    /// golden-section search on the best pair.
    fn pair_oracle(x: &[f64], grid: &[f64]) -> f64 {
        let ll = |a: f64, b: f64, t: f64| -> f64 {
            x.iter()
                .map(|&xi| (t * laplace_pdf(xi - a) + (1.0 - t) * laplace_pdf(xi - b)).ln())
                .sum()
        };
        let mut best = (f64::NEG_INFINITY, 0, 0, 0.0);
        for i in 0..grid.len() {
            for j in i..grid.len() {
                for k in 0..=100 {
                    let t = k as f64 / 100.0;
                    let v = ll(grid[i], grid[j], t);
                    if v > best.0 {
                        best = (v, i, j, t);
                    }
                }
            }
        }
        let (_, i, j, t) = best;
        let (mut lo, mut hi) = ((t - 0.01).max(0.0), (t + 0.01).min(1.0));
        for _ in 0..100 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if ll(grid[i], grid[j], m1) < ll(grid[i], grid[j], m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        ll(grid[i], grid[j], 0.5 * (lo + hi)).max(best.0)
    }

    #[test]
    fn fit_matches_simplex_oracle_on_tiny_problems() {
        let mut rng = stream(99);
        let overrides = SolverOverrides {
            grid_pad: Some(0.5),
            grid_step: Some(0.2),
            ..Default::default()
        };
        for n in 1..=4 {
            for _ in 0..5 {
                let x: Vec<f64> = (0..n).map(|_| 3.0 * open01(&mut rng) - 1.5).collect();
                let cfg = SolverConfig::for_data(&x).with_overrides(&overrides);
                let grid = candidate_grid(&x, &cfg);
                assert!(grid.len() <= 25, "{}", grid.len());
                let r = fit(&x, &cfg).unwrap();
                assert!(r.converged);
                let em = em_oracle(&x, &grid);
                assert!((r.loglik - em).abs() < 1e-6, "n={n} fit {} em {em}", r.loglik);
                if n <= 2 {
                    let brute = pair_oracle(&x, &grid);
                    assert!((r.loglik - brute).abs() < 1e-6, "n={n} fit {} brute {brute}", r.loglik);
                }
            }
        }
    }

    #[test]
    fn fit_is_translation_equivariant() {
        let spec = GroundTruthSpec::finite(vec![-2.0, 2.0], vec![0.5, 0.5], 21);
        let x = sample(&spec, 40).unwrap().x;
        let c = 3.25;
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let cfg = SolverConfig::for_data(&x);
        let a = fit(&x, &cfg).unwrap();
        let b = fit(&shifted, &cfg).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-6);
        assert_eq!(a.g_hat.len(), b.g_hat.len());
        for ((ya, wa), (yb, wb)) in a.g_hat.pairs().zip(b.g_hat.pairs()) {
            assert!((ya + c - yb).abs() < 1e-6, "{ya} {yb}");
            assert!((wa - wb).abs() < 1e-6);
        }
    }

    #[test]
    fn certificate_across_families() {
        use crate::model::Family;
        let families = [
            Family::FiniteDiscrete {
                atoms: vec![-2.0, 2.0],
                weights: vec![0.5, 0.5],
            },
            Family::ExponentialTail { rate: 1.0 },
            Family::CompactUniformDiscretized { half_width: 3.0 },
        ];
        for (i, family) in families.into_iter().enumerate() {
            for n in [20, 300] {
                let spec = GroundTruthSpec { family: family.clone(), seed: 50 + i as u64 };
                let x = sample(&spec, n).unwrap().x;
                let cfg = SolverConfig::for_data(&x);
                let r = fit(&x, &cfg).unwrap();
                assert!(r.converged && r.gradient_sup <= cfg.grad_tol);
                assert!(r.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
                assert!(r.g_hat.len() <= n);
                for &a in r.g_hat.atoms() {
                    assert!(gradient_function(&r.g_hat, &x, a).abs() <= 10.0 * cfg.grad_tol);
                }
            }
        }
    }
}
