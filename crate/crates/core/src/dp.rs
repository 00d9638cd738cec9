//! Dirichlet-process mixture of Laplace kernels.
//!
//! The prior is `G ~ DP(alpha)` with base density
//! `alpha'(y) ∝ exp(-b |y|^tau)`. The posterior is sampled with auxiliary
//! components for the non-conjugate reassignment step and random-walk
//! Metropolis for the cluster locations. Posterior means of the mixture
//! density and of the mixing CDF are accumulated from the draws.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::metrics::{DensityGrid, GridSpec, StepCdf};
use crate::model::laplace_kernel_sums;
use crate::quadrature::{integrate, kronrod15};
use crate::rng::{open01, stream, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpPrior {
    /// Total mass `alpha(R)` of the base measure.
    pub total_mass: f64,
    pub base_b: f64,
    /// Tail exponent, in `(0, 1]`.
    pub base_tau: f64,
}

impl Default for DpPrior {
    fn default() -> Self {
        Self {
            total_mass: 1.0,
            base_b: 1.0,
            base_tau: 1.0,
        }
    }
}

impl DpPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.total_mass > 0.0) || !self.total_mass.is_finite() {
            return Err(Error::param("total_mass", format!("must be positive, got {}", self.total_mass)));
        }
        if !(self.base_b > 0.0) || !self.base_b.is_finite() {
            return Err(Error::param("base_b", format!("must be positive, got {}", self.base_b)));
        }
        if !(self.base_tau > 0.0 && self.base_tau <= 1.0) {
            return Err(Error::param("base_tau", format!("must lie in (0, 1], got {}", self.base_tau)));
        }
        Ok(())
    }

    /// `log` of `int exp(-b |y|^tau) dy = 2 Gamma(1 + 1/tau) / b^(1/tau)`.
    pub fn log_normalizer(&self) -> f64 {
        let inv = 1.0 / self.base_tau;
        std::f64::consts::LN_2 + ln_gamma(1.0 + inv) - inv * self.base_b.ln()
    }

    fn log_kernel(&self, y: f64) -> f64 {
        -self.base_b * y.abs().powf(self.base_tau)
    }
}

pub fn base_density(prior: &DpPrior, y: f64) -> f64 {
    (prior.log_kernel(y) - prior.log_normalizer()).exp()
}

/// Exact draw: `|Y| = (G / b)^(1/tau)` with `G ~ Gamma(1/tau, 1)` and a
/// fair random sign.
pub fn base_sample<R: Rng + ?Sized>(prior: &DpPrior, rng: &mut R) -> f64 {
    BaseSampler::new(prior).sample(rng)
}

/// Base CDF via the regularized incomplete gamma function.
pub fn base_cdf(prior: &DpPrior, y: f64) -> f64 {
    if y == 0.0 {
        return 0.5;
    }
    let inner = gamma_lr(1.0 / prior.base_tau, prior.base_b * y.abs().powf(prior.base_tau));
    if y > 0.0 {
        0.5 + 0.5 * inner
    } else {
        0.5 - 0.5 * inner
    }
}

/// Moment generating function of the base law. Finite only for `tau = 1`
/// and `|s| < b`, or `s = 0`.
pub fn base_mgf(prior: &DpPrior, s: f64) -> Result<f64> {
    if s == 0.0 {
        return Ok(1.0);
    }
    if prior.base_tau == 1.0 && s.abs() < prior.base_b {
        let b2 = prior.base_b * prior.base_b;
        return Ok(b2 / (b2 - s * s));
    }
    Err(Error::param(
        "s",
        format!(
            "base MGF is infinite at s = {s} (b = {}, tau = {})",
            prior.base_b, prior.base_tau
        ),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Fresh base draws offered at every reassignment.
    pub aux_components: usize,
    /// Random-walk scale for a singleton cluster; adapted during burn-in.
    pub location_step: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            burn_in: 5_000,
            thin: 5,
            aux_components: 3,
            location_step: 0.5,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::param(
                "burn_in",
                format!("must be below iterations ({} >= {})", self.burn_in, self.iterations),
            ));
        }
        if self.thin == 0 {
            return Err(Error::param("thin", "must be at least 1"));
        }
        if self.aux_components == 0 {
            return Err(Error::param("aux_components", "must be at least 1"));
        }
        if !(self.location_step > 0.0) || !self.location_step.is_finite() {
            return Err(Error::param("location_step", "must be positive"));
        }
        Ok(())
    }

    /// Number of draws a chain returns.
    pub fn kept_draws(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// One retained state of the chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSample {
    /// Cluster index of each observation, in input order.
    pub assignments: Vec<usize>,
    pub cluster_locations: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    /// `sum_i log f(x_i - y_{c_i})`.
    pub loglik: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub clusters: usize,
    pub loglik: f64,
}

/// Per-sweep diagnostics of a chain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainTrace {
    pub rows: Vec<TraceRow>,
    /// Location acceptance rate after burn-in.
    pub acceptance: f64,
    pub final_step: f64,
}

impl ChainTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Locations and observations up to this size use cached exponentials.
const EXP_CACHE_BOUND: f64 = 300.0;

/// Draws from the base law with the gamma sampler built once.
enum BaseSampler {
    Laplace { scale: f64 },
    Power { gamma: Gamma<f64>, b: f64, inv_tau: f64 },
}

impl BaseSampler {
    fn new(prior: &DpPrior) -> Self {
        if prior.base_tau == 1.0 {
            BaseSampler::Laplace {
                scale: 1.0 / prior.base_b,
            }
        } else {
            BaseSampler::Power {
                gamma: Gamma::new(1.0 / prior.base_tau, 1.0).expect("validated shape"),
                b: prior.base_b,
                inv_tau: 1.0 / prior.base_tau,
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let r = match self {
            BaseSampler::Laplace { scale } => {
                let e: f64 = Exp1.sample(rng);
                scale * e
            }
            BaseSampler::Power { gamma, b, inv_tau } => (gamma.sample(rng) / b).powf(*inv_tau),
        };
        if rng.random::<bool>() {
            r
        } else {
            -r
        }
    }
}

struct Chain<'a> {
    x: &'a [f64],
    prior: DpPrior,
    assign: Vec<usize>,
    /// Cluster slots; a slot with size 0 is free.
    locs: Vec<f64>,
    sizes: Vec<usize>,
    free: Vec<usize>,
    step: f64,
    base: BaseSampler,
    /// `exp(loc)` and `exp(-loc)` per slot.
    exp_loc: Vec<(f64, f64)>,
    /// `exp(x)` and `exp(-x)` per observation.
    exp_x: Vec<(f64, f64)>,
    /// Largest `|loc|` ever held by a slot.
    loc_bound: f64,
    exact_only: bool,
}

impl<'a> Chain<'a> {
    fn new(x: &'a [f64], prior: DpPrior, step: f64) -> Self {
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[(sorted.len() - 1) / 2];
        Self {
            x,
            prior,
            assign: vec![0; x.len()],
            locs: vec![median],
            sizes: vec![x.len()],
            free: Vec::new(),
            step,
            base: BaseSampler::new(&prior),
            exp_loc: vec![(median.exp(), (-median).exp())],
            exp_x: x.iter().map(|&v| (v.exp(), (-v).exp())).collect(),
            loc_bound: median.abs(),
            exact_only: x.iter().any(|v| v.abs() > EXP_CACHE_BOUND),
        }
    }

    fn set_loc(&mut self, k: usize, loc: f64) {
        self.locs[k] = loc;
        self.exp_loc[k] = (loc.exp(), (-loc).exp());
        self.loc_bound = self.loc_bound.max(loc.abs());
    }

    /// Selection weights `size * f(x - loc)` for the slots and
    /// `share * f(x - a)` for the auxiliary draws, up to a common factor,
    /// rescaled by the closest candidate. Returns their sum.
    fn exact_weights(&self, xi: f64, aux: &[f64], share: f64, weights: &mut Vec<f64>) -> f64 {
        weights.clear();
        for (k, &loc) in self.locs.iter().enumerate() {
            weights.push(if self.sizes[k] > 0 { (xi - loc).abs() } else { f64::INFINITY });
        }
        weights.extend(aux.iter().map(|&a| (xi - a).abs()));
        let dmin = weights.iter().copied().fold(f64::INFINITY, f64::min);
        let slots = self.locs.len();
        let mut total = 0.0;
        for (k, w) in weights.iter_mut().enumerate() {
            let scale = if k < slots { self.sizes[k] as f64 } else { share };
            *w = if scale > 0.0 { scale * (dmin - *w).exp() } else { 0.0 };
            total += *w;
        }
        total
    }

    /// Same weights without the rescaling, from the cached exponentials;
    /// valid while every `|x|` and `|loc|` stays below [`EXP_CACHE_BOUND`].
    fn cached_weights(&self, i: usize, aux: &[f64], share: f64, weights: &mut Vec<f64>) -> f64 {
        let xi = self.x[i];
        let (ex, emx) = self.exp_x[i];
        weights.clear();
        let mut total = 0.0;
        for k in 0..self.locs.len() {
            let size = self.sizes[k] as f64;
            let (el, eml) = self.exp_loc[k];
            let w = if xi >= self.locs[k] { size * emx * el } else { size * ex * eml };
            weights.push(w);
            total += w;
        }
        for &a in aux {
            let w = share * (-(xi - a).abs()).exp();
            weights.push(w);
            total += w;
        }
        total
    }

    fn open_slot(&mut self, loc: f64) -> usize {
        match self.free.pop() {
            Some(k) => {
                self.set_loc(k, loc);
                k
            }
            None => {
                self.locs.push(loc);
                self.sizes.push(0);
                self.exp_loc.push((0.0, 0.0));
                let k = self.locs.len() - 1;
                self.set_loc(k, loc);
                k
            }
        }
    }

    fn reassign(&mut self, rng: &mut StreamRng, aux: &mut [f64], weights: &mut Vec<f64>) {
        let m = aux.len();
        let share = self.prior.total_mass / m as f64;
        for i in 0..self.x.len() {
            let xi = self.x[i];
            let c = self.assign[i];
            self.sizes[c] -= 1;
            let mut fresh = 0;
            if self.sizes[c] == 0 {
                aux[0] = self.locs[c];
                self.free.push(c);
                fresh = 1;
            }
            for a in aux.iter_mut().skip(fresh) {
                *a = self.base.sample(rng);
            }
            let slots = self.locs.len();
            let total = if self.exact_only || self.loc_bound > EXP_CACHE_BOUND {
                self.exact_weights(xi, aux, share, weights)
            } else {
                self.cached_weights(i, aux, share, weights)
            };
            let mut u = open01(rng) * total;
            let mut pick = weights.len() - 1;
            for (k, &w) in weights.iter().enumerate() {
                if u < w {
                    pick = k;
                    break;
                }
                u -= w;
            }
            // Free slots carry zero weight and are never picked.
            let target = if pick < slots { pick } else { self.open_slot(aux[pick - slots]) };
            self.sizes[target] += 1;
            self.assign[i] = target;
        }
    }

    /// One random-walk Metropolis move per cluster; returns
    /// `(accepted, proposed, loglik)`.
    fn move_locations(&mut self, rng: &mut StreamRng, cur: &mut Vec<f64>, prop: &mut Vec<f64>) -> (usize, usize, f64) {
        let slots = self.locs.len();
        let proposal: Vec<f64> = (0..slots)
            .map(|k| {
                if self.sizes[k] == 0 {
                    self.locs[k]
                } else {
                    let z: f64 = StandardNormal.sample(rng);
                    self.locs[k] + self.step * z / (self.sizes[k] as f64).sqrt()
                }
            })
            .collect();
        cur.clear();
        cur.resize(slots, 0.0);
        prop.clear();
        prop.resize(slots, 0.0);
        for (&xi, &c) in self.x.iter().zip(&self.assign) {
            cur[c] += (xi - self.locs[c]).abs();
            prop[c] += (xi - proposal[c]).abs();
        }
        let (mut accepted, mut proposed, mut abs_sum) = (0, 0, 0.0);
        for k in 0..slots {
            if self.sizes[k] == 0 {
                continue;
            }
            proposed += 1;
            let log_ratio = self.prior.log_kernel(proposal[k]) - prop[k] - self.prior.log_kernel(self.locs[k]) + cur[k];
            if log_ratio >= 0.0 || open01(rng).ln() < log_ratio {
                self.set_loc(k, proposal[k]);
                accepted += 1;
                abs_sum += prop[k];
            } else {
                abs_sum += cur[k];
            }
        }
        let loglik = -(self.x.len() as f64) * std::f64::consts::LN_2 - abs_sum;
        (accepted, proposed, loglik)
    }

    fn active(&self) -> usize {
        self.sizes.iter().filter(|&&s| s > 0).count()
    }

    fn snapshot(&self, loglik: f64) -> PosteriorSample {
        let mut relabel = vec![usize::MAX; self.locs.len()];
        let mut cluster_locations = Vec::new();
        let mut cluster_sizes = Vec::new();
        for k in 0..self.locs.len() {
            if self.sizes[k] > 0 {
                relabel[k] = cluster_locations.len();
                cluster_locations.push(self.locs[k]);
                cluster_sizes.push(self.sizes[k]);
            }
        }
        PosteriorSample {
            assignments: self.assign.iter().map(|&c| relabel[c]).collect(),
            cluster_locations,
            cluster_sizes,
            loglik,
        }
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

const ADAPT_BATCH: usize = 50;
/// Random-walk moves per cluster and sweep.
const LOCATION_MOVES: usize = 2;
const TARGET_ACCEPTANCE: f64 = 0.44;

/// Runs the sampler and hands every retained draw to `visit`.
pub fn run_chain_with<F: FnMut(&PosteriorSample)>(
    x: &[f64],
    prior: &DpPrior,
    cfg: &McmcConfig,
    mut visit: F,
) -> Result<ChainTrace> {
    check_data(x)?;
    prior.validate()?;
    cfg.validate()?;
    let mut rng = stream(cfg.seed);
    let mut chain = Chain::new(x, *prior, cfg.location_step);
    let mut aux = vec![0.0; cfg.aux_components];
    let (mut weights, mut cur, mut prop) = (Vec::new(), Vec::new(), Vec::new());
    let mut trace = ChainTrace::default();
    let (mut batch_acc, mut batch_prop, mut batches) = (0, 0, 0usize);
    let (mut acc, mut tried) = (0usize, 0usize);
    for t in 0..cfg.iterations {
        chain.reassign(&mut rng, &mut aux, &mut weights);
        let (mut a, mut p, mut loglik) = (0, 0, 0.0);
        for _ in 0..LOCATION_MOVES {
            let (da, dp, ll) = chain.move_locations(&mut rng, &mut cur, &mut prop);
            a += da;
            p += dp;
            loglik = ll;
        }
        if t < cfg.burn_in {
            batch_acc += a;
            batch_prop += p;
            if (t + 1) % ADAPT_BATCH == 0 && batch_prop > 0 {
                batches += 1;
                let rate = batch_acc as f64 / batch_prop as f64;
                let delta = (1.0 / (batches as f64).sqrt()).min(0.1);
                let dir = if rate > TARGET_ACCEPTANCE { 1.0 } else { -1.0 };
                chain.step *= (dir * delta).exp();
                batch_acc = 0;
                batch_prop = 0;
            }
        } else {
            acc += a;
            tried += p;
            if (t - cfg.burn_in) % cfg.thin == 0 {
                visit(&chain.snapshot(loglik));
            }
        }
        trace.rows.push(TraceRow {
            iteration: t,
            clusters: chain.active(),
            loglik,
        });
    }
    trace.acceptance = if tried > 0 { acc as f64 / tried as f64 } else { 0.0 };
    trace.final_step = chain.step;
    Ok(trace)
}

/// Post-burn-in, thinned draws; deterministic given `cfg.seed`.
pub fn run_chain(x: &[f64], prior: &DpPrior, cfg: &McmcConfig) -> Result<Vec<PosteriorSample>> {
    cfg.validate()?;
    let mut draws = Vec::with_capacity(cfg.kept_draws());
    run_chain_with(x, prior, cfg, |d| draws.push(d.clone()))?;
    Ok(draws)
}

/// Bayes density and mixing-distribution estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesEstimates {
    /// Posterior mean of the mixture density.
    pub mean_density: DensityGrid,
    /// Posterior mean of `G`; mass outside the grid sits on its end points.
    pub mean_cdf: StepCdf,
    /// Posterior mean CDF at every grid point.
    pub cdf_values: Vec<f64>,
    /// Effective sample size of the log-likelihood trace.
    pub ess: f64,
    pub draws_used: usize,
}

#[derive(Serialize)]
struct EstimatesJson {
    grid: GridSpec,
    ess: f64,
    draws_used: usize,
    density_integral: f64,
    mixing_mean: f64,
}

impl BayesEstimates {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&EstimatesJson {
            grid: self.mean_density.grid,
            ess: self.ess,
            draws_used: self.draws_used,
            density_integral: self.mean_density.integral(),
            mixing_mean: self.mean_cdf.mean(),
        })?)
    }

    /// Columns `t, density, cdf`.
    pub fn write_grid_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "density", "cdf"])?;
        for (k, (&d, &c)) in self.mean_density.values.iter().zip(&self.cdf_values).enumerate() {
            let t = self.mean_density.grid.point(k);
            out.write_record([t.to_string(), d.to_string(), c.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `(alpha' * f)(t)` at every grid point.
///
/// Splits the Laplace kernel into its two one-sided exponentials and
/// carries both running integrals across the grid.
pub fn base_convolved(prior: &DpPrior, grid: &GridSpec) -> Vec<f64> {
    let a = |y: f64| base_density(prior, y);
    let pts = grid.points();
    let len = pts.len();
    let segment = |lo: f64, hi: f64, g: &dyn Fn(f64) -> f64| -> f64 {
        if lo < 0.0 && hi > 0.0 {
            integrate(g, lo, 0.0, 1e-15, 1e-12) + integrate(g, 0.0, hi, 1e-15, 1e-12)
        } else if lo == 0.0 || hi == 0.0 {
            integrate(g, lo, hi, 1e-15, 1e-12)
        } else {
            kronrod15(g, lo, hi)
        }
    };
    let tail = |lo: f64, hi: f64, g: &dyn Fn(f64) -> f64| -> f64 {
        let mut breaks = vec![lo, hi];
        if lo < 0.0 && hi > 0.0 {
            breaks.insert(1, 0.0);
        }
        breaks.windows(2).map(|w| integrate(g, w[0], w[1], 1e-15, 1e-12)).sum()
    };
    const REACH: f64 = 60.0;
    // left[k] = int_{-inf}^{t_k} a(y) exp(y - t_k) dy
    let mut left = vec![0.0; len];
    let t0 = pts[0];
    left[0] = tail(t0 - REACH, t0, &|y| a(y) * (y - t0).exp());
    let decay = (-grid.step).exp();
    for k in 1..len {
        let tk = pts[k];
        left[k] = left[k - 1] * decay + segment(pts[k - 1], tk, &|y| a(y) * (y - tk).exp());
    }
    // right[k] = int_{t_k}^{inf} a(y) exp(t_k - y) dy
    let mut right = vec![0.0; len];
    let tn = pts[len - 1];
    right[len - 1] = tail(tn, tn + REACH, &|y| a(y) * (tn - y).exp());
    for k in (0..len - 1).rev() {
        let tk = pts[k];
        right[k] = right[k + 1] * decay + segment(tk, pts[k + 1], &|y| a(y) * (tk - y).exp());
    }
    left.iter().zip(&right).map(|(l, r)| 0.5 * (l + r)).collect()
}

/// Streaming fold of posterior draws into [`BayesEstimates`].
pub struct BayesAccumulator {
    prior: DpPrior,
    grid: GridSpec,
    n: usize,
    /// `(location, size)` of every cluster of every draw.
    atoms: Vec<(f64, f64)>,
    logliks: Vec<f64>,
}

impl BayesAccumulator {
    pub fn new(prior: &DpPrior, grid: GridSpec, n: usize) -> Self {
        Self {
            prior: *prior,
            grid,
            n,
            atoms: Vec::new(),
            logliks: Vec::new(),
        }
    }

    pub fn push(&mut self, draw: &PosteriorSample) {
        self.atoms.extend(
            draw.cluster_locations
                .iter()
                .zip(&draw.cluster_sizes)
                .map(|(&l, &s)| (l, s as f64)),
        );
        self.logliks.push(draw.loglik);
    }

    pub fn finish(mut self) -> Result<BayesEstimates> {
        let draws = self.logliks.len();
        if draws == 0 {
            return Err(Error::InsufficientPoints { needed: 1, got: 0 });
        }
        self.prior.validate()?;
        let alpha = self.prior.total_mass;
        let denom = alpha + self.n as f64;
        let per_draw = 1.0 / (draws as f64 * denom);
        let pts = self.grid.points();

        self.atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let sources: Vec<(f64, f64)> = self.atoms.iter().map(|&(l, s)| (l, 0.5 * s * per_draw)).collect();
        let clusters = laplace_kernel_sums(&sources, &pts);
        let base = base_convolved(&self.prior, &self.grid);
        let density: Vec<f64> = clusters
            .iter()
            .zip(&base)
            .map(|(c, b)| c + alpha / denom * b)
            .collect();

        let mut jumps = vec![0.0; pts.len()];
        for &(l, s) in &self.atoms {
            let k = pts.partition_point(|&t| t < l).min(pts.len() - 1);
            jumps[k] += s * per_draw;
        }
        let mut running = 0.0;
        let mut cdf_values: Vec<f64> = pts
            .iter()
            .zip(&jumps)
            .map(|(&t, &j)| {
                running += j;
                (running + alpha / denom * base_cdf(&self.prior, t)).min(1.0)
            })
            .collect();
        for k in 1..cdf_values.len() {
            cdf_values[k] = cdf_values[k].max(cdf_values[k - 1]);
        }
        if let Some(last) = cdf_values.last_mut() {
            *last = 1.0;
        }
        Ok(BayesEstimates {
            mean_density: DensityGrid::new(self.grid, density)?,
            mean_cdf: StepCdf::from_grid(self.grid, &cdf_values)?,
            cdf_values,
            ess: effective_sample_size(&self.logliks),
            draws_used: draws,
        })
    }
}

/// Posterior means over `grid` from a list of draws.
pub fn bayes_estimates(
    draws: &[PosteriorSample],
    x: &[f64],
    prior: &DpPrior,
    grid: GridSpec,
) -> Result<BayesEstimates> {
    if draws.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    let mut acc = BayesAccumulator::new(prior, grid, x.len());
    for d in draws {
        acc.push(d);
    }
    acc.finish()
}

/// Runs a chain and folds its draws without storing them.
pub fn fit_bayes(
    x: &[f64],
    prior: &DpPrior,
    cfg: &McmcConfig,
    grid: GridSpec,
) -> Result<(BayesEstimates, ChainTrace)> {
    let mut acc = BayesAccumulator::new(prior, grid, x.len());
    let trace = run_chain_with(x, prior, cfg, |d| acc.push(d))?;
    Ok((acc.finish()?, trace))
}

/// Grid with spacing `step` wide enough that the predictive mass outside it
/// is below `1e-9` for any draw.
pub fn default_grid(x: &[f64], prior: &DpPrior, step: f64) -> Result<GridSpec> {
    check_data(x)?;
    prior.validate()?;
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    // Base tail quantile at 1e-9, plus room for the Laplace kernel.
    let upper = |q: f64| 2.0 * (1.0 - base_cdf(prior, q));
    let mut q = 1.0;
    while upper(q) > 1e-9 && q < 1e6 {
        q *= 2.0;
    }
    let (mut a, mut b) = (0.5 * q, q);
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if upper(mid) > 1e-9 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let reach = b + 22.0;
    let lo = lo.min(0.0) - reach;
    let hi = hi.max(0.0) + reach;
    GridSpec::covering(lo, hi, step)
}

/// Draw average of `(alpha M_base(s) + sum size e^(s loc)) / (alpha + n)`.
pub fn posterior_mgf(draws: &[PosteriorSample], x: &[f64], prior: &DpPrior, s: f64) -> Result<f64> {
    Ok(posterior_mgf_draws(draws, x, prior, s)?.iter().sum::<f64>() / draws.len() as f64)
}

/// Per-draw predictive MGF values.
pub fn posterior_mgf_draws(draws: &[PosteriorSample], x: &[f64], prior: &DpPrior, s: f64) -> Result<Vec<f64>> {
    if draws.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    prior.validate()?;
    let base = base_mgf(prior, s)?;
    if s == 0.0 {
        return Ok(vec![1.0; draws.len()]);
    }
    let denom = prior.total_mass + x.len() as f64;
    Ok(draws
        .iter()
        .map(|d| {
            let clusters: f64 = d
                .cluster_locations
                .iter()
                .zip(&d.cluster_sizes)
                .map(|(&l, &n)| n as f64 * (s * l).exp())
                .sum();
            (prior.total_mass * base + clusters) / denom
        })
        .collect())
}

/// Effective sample size with Geyer's initial monotone sequence estimator.
pub fn effective_sample_size(trace: &[f64]) -> f64 {
    let n = trace.len();
    if n < 4 {
        return n as f64;
    }
    let mean = trace.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = trace.iter().map(|v| v - mean).collect();
    let acov = |lag: usize| -> f64 { centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 };
    let c0 = acov(0);
    if !(c0 > 0.0) {
        return n as f64;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = (acov(2 * m) + acov(2 * m + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        m += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64 * (n as f64).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::w1_distance;
    use crate::model::{laplace_pdf, sample, DiscreteDistribution, GroundTruthSpec};
    use crate::quadrature::integrate_pieces;
    use proptest::prelude::*;

    fn priors() -> Vec<DpPrior> {
        [(1.0, 1.0), (2.5, 1.0), (1.0, 0.5), (0.7, 0.3)]
            .into_iter()
            .map(|(b, tau)| DpPrior {
                total_mass: 1.0,
                base_b: b,
                base_tau: tau,
            })
            .collect()
    }

    /// Breakpoints 0, 1, 2, 4, ... reaching far into the tail.
    fn tail_breaks(prior: &DpPrior) -> Vec<f64> {
        let mut breaks = vec![0.0];
        let mut t = 1.0;
        while prior.base_b * f64::powf(t, prior.base_tau) < 60.0 {
            breaks.push(t);
            t *= 2.0;
        }
        breaks.push(t);
        breaks
    }

    #[test]
    fn laplace_base_case() {
        let p = DpPrior::default();
        assert!((base_density(&p, 0.0) - 0.5).abs() < 1e-15);
        for y in [-3.0, 0.4, 7.0] {
            assert!((base_density(&p, y) - laplace_pdf(y)).abs() < 1e-15);
            assert!((base_cdf(&p, y) - crate::model::laplace_cdf(y)).abs() < 1e-12);
        }
    }

    #[test]
    fn base_density_is_symmetric() {
        let mut rng = stream(1);
        for p in priors() {
            for _ in 0..20 {
                let y = 20.0 * open01(&mut rng) - 10.0;
                assert_eq!(base_density(&p, y), base_density(&p, -y));
            }
        }
    }

    #[test]
    fn normalizer_matches_quadrature() {
        for p in priors() {
            let half = integrate_pieces(|y| base_density(&p, y), &tail_breaks(&p), 1e-14);
            assert!((2.0 * half - 1.0).abs() < 1e-10, "{p:?}: {}", 2.0 * half);
        }
    }

    #[test]
    fn base_cdf_matches_quadrature() {
        for p in priors() {
            for y in [0.3, 1.0, 4.0, 12.0] {
                let q = 0.5 + integrate_pieces(|t| base_density(&p, t), &[0.0, y], 1e-14);
                assert!((base_cdf(&p, y) - q).abs() < 1e-10, "{p:?} y={y}");
                assert!((base_cdf(&p, -y) - (1.0 - q)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn laplace_base_draws_have_variance_two() {
        let mut rng = stream(2);
        let p = DpPrior::default();
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let y = base_sample(&p, &mut rng);
            s1 += y;
            s2 += y * y;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((var / 2.0 - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn heavy_tailed_draws_follow_base_cdf() {
        let mut rng = stream(3);
        let p = DpPrior {
            total_mass: 1.0,
            base_b: 0.7,
            base_tau: 0.3,
        };
        let n = 100_000;
        let mut ys: Vec<f64> = (0..n).map(|_| base_sample(&p, &mut rng)).collect();
        ys.sort_by(f64::total_cmp);
        let ks = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let c = base_cdf(&p, y);
                (c - i as f64 / n as f64).abs().max((c - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        // 1.63 / sqrt(n) is the 1% Kolmogorov critical value.
        assert!(ks < 1.63 / (n as f64).sqrt(), "{ks}");
    }

    #[test]
    fn base_mgf_domain() {
        let p = DpPrior::default();
        assert_eq!(base_mgf(&p, 0.0).unwrap(), 1.0);
        assert!((base_mgf(&p, 0.5).unwrap() - 1.0 / 0.75).abs() < 1e-15);
        assert!(base_mgf(&p, 1.0).is_err());
        let heavy = DpPrior {
            base_tau: 0.5,
            ..p
        };
        assert!(base_mgf(&heavy, 0.01).is_err());
        assert_eq!(base_mgf(&heavy, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn base_convolution_matches_oracles() {
        let grid = GridSpec::covering(-8.0, 8.0, 0.01).unwrap();
        let laplace = base_convolved(&DpPrior::default(), &grid);
        for (k, v) in laplace.iter().enumerate() {
            let t = grid.point(k).abs();
            assert!((v - (1.0 + t) * (-t).exp() / 4.0).abs() < 1e-12, "t={t}");
        }
        for p in priors() {
            let conv = base_convolved(&p, &grid);
            for k in (0..grid.len).step_by(97) {
                let t = grid.point(k);
                let mut breaks: Vec<f64> = tail_breaks(&p).iter().flat_map(|&b| [b, -b]).collect();
                breaks.push(t);
                breaks.sort_by(f64::total_cmp);
                breaks.dedup();
                let q = integrate_pieces(|y| base_density(&p, y) * laplace_pdf(t - y), &breaks, 1e-14);
                assert!((conv[k] - q).abs() < 1e-10, "{p:?} t={t}: {} vs {q}", conv[k]);
            }
        }
    }

    fn quick(iterations: usize, seed: u64) -> McmcConfig {
        McmcConfig {
            iterations,
            burn_in: iterations / 4,
            thin: 1,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let x = [0.0];
        let p = DpPrior::default();
        for bad in [
            McmcConfig { burn_in: 10, iterations: 10, ..Default::default() },
            McmcConfig { thin: 0, ..Default::default() },
            McmcConfig { aux_components: 0, ..Default::default() },
            McmcConfig { location_step: 0.0, ..Default::default() },
        ] {
            assert!(run_chain(&x, &p, &bad).is_err());
        }
        let bad_prior = DpPrior { base_tau: 1.5, ..p };
        assert!(run_chain(&x, &bad_prior, &quick(10, 0)).is_err());
        assert!(matches!(run_chain(&[], &p, &quick(10, 0)), Err(Error::EmptyData)));
        assert_eq!(quick(10, 0).kept_draws(), run_chain(&x, &p, &quick(10, 0)).unwrap().len());
        let thinned = McmcConfig { thin: 3, ..quick(10, 0) };
        assert_eq!(thinned.kept_draws(), run_chain(&x, &p, &thinned).unwrap().len());
    }

    #[test]
    fn single_observation_posterior() {
        let sup = histogram_error(5);
        assert!(sup < 0.02, "sup {sup}");
    }

    /// Sup-norm gap between the location histogram of an `n = 1` chain and
    /// the exact posterior `∝ alpha'(y) f(x - y)`, over 200 bins.
    fn histogram_error(seed: u64) -> f64 {
        let x = [1.3];
        let p = DpPrior::default();
        let cfg = McmcConfig {
            iterations: 100_000,
            burn_in: 1_000,
            thin: 1,
            seed,
            ..Default::default()
        };
        let draws = run_chain(&x, &p, &cfg).unwrap();
        assert!(draws.iter().all(|d| d.cluster_sizes == vec![1]));
        // Exact posterior density of the single location.
        let post = |y: f64| base_density(&p, y) * laplace_pdf(x[0] - y);
        let z = integrate_pieces(post, &[-60.0, 0.0, x[0], 60.0], 1e-14);
        let (lo, hi, bins) = (x[0] - 10.0, x[0] + 10.0, 200usize);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for d in &draws {
            let y = d.cluster_locations[0];
            if y >= lo && y < hi {
                counts[((y - lo) / width) as usize] += 1;
            }
        }
        let mut sup: f64 = 0.0;
        for (b, &c) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            let exact = integrate_pieces(post, &[a, a + width], 1e-14) / z / width;
            let est = c as f64 / draws.len() as f64 / width;
            sup = sup.max((exact - est).abs());
        }
        sup
    }

    #[test]
    fn vanishing_total_mass_keeps_one_cluster() {
        let spec = GroundTruthSpec::finite(vec![-2.0, 2.0], vec![0.5, 0.5], 8);
        let x = sample(&spec, 20).unwrap().x;
        let p = DpPrior {
            total_mass: 1e-6,
            ..Default::default()
        };
        let draws = run_chain(&x, &p, &quick(2_000, 9)).unwrap();
        let single = draws.iter().filter(|d| d.cluster_sizes.len() == 1).count();
        assert!(single as f64 > 0.95 * draws.len() as f64);
    }

    #[test]
    fn chain_is_deterministic() {
        let spec = GroundTruthSpec::finite(vec![-2.0, 2.0], vec![0.5, 0.5], 10);
        let x = sample(&spec, 25).unwrap().x;
        let p = DpPrior::default();
        let a = run_chain(&x, &p, &quick(500, 11)).unwrap();
        let b = run_chain(&x, &p, &quick(500, 11)).unwrap();
        assert_eq!(a, b);
        let c = run_chain(&x, &p, &quick(500, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn draws_are_consistent() {
        let spec = GroundTruthSpec::finite(vec![-2.0, 2.0], vec![0.5, 0.5], 13);
        let x = sample(&spec, 40).unwrap().x;
        let draws = run_chain(&x, &DpPrior::default(), &quick(400, 14)).unwrap();
        for d in &draws {
            assert_eq!(d.cluster_sizes.iter().sum::<usize>(), x.len());
            assert_eq!(d.cluster_sizes.len(), d.cluster_locations.len());
            let mut counts = vec![0; d.cluster_sizes.len()];
            for &c in &d.assignments {
                counts[c] += 1;
            }
            assert_eq!(counts, d.cluster_sizes);
            let ll: f64 = x
                .iter()
                .zip(&d.assignments)
                .map(|(&xi, &c)| laplace_pdf(xi - d.cluster_locations[c]).ln())
                .sum();
            assert!((ll - d.loglik).abs() < 1e-9);
        }
    }

    #[test]
    fn single_cluster_limit_of_estimates() {
        let c = 0.75;
        let draw = PosteriorSample {
            assignments: vec![0; 5],
            cluster_locations: vec![c],
            cluster_sizes: vec![5],
            loglik: 0.0,
        };
        let p = DpPrior {
            total_mass: 1e-12,
            ..Default::default()
        };
        let grid = GridSpec::covering(-30.0, 30.0, 1e-3).unwrap();
        let est = bayes_estimates(&[draw], &[0.0; 5], &p, grid).unwrap();
        for (k, v) in est.mean_density.values.iter().enumerate() {
            assert!((v - laplace_pdf(grid.point(k) - c)).abs() < 1e-11);
        }
        assert!(est.mean_cdf.eval(c - 2e-3) < 1e-11);
        assert!(est.mean_cdf.eval(c + 1e-3) > 1.0 - 1e-11);
        assert!(bayes_estimates(&[], &[0.0], &p, grid).is_err());
    }

    #[test]
    fn estimates_are_normalized() {
        let spec = GroundTruthSpec::finite(vec![-2.0, 2.0], vec![0.5, 0.5], 15);
        let x = sample(&spec, 30).unwrap().x;
        for p in priors() {
            let cfg = quick(800, 16);
            let grid = default_grid(&x, &p, 1e-2).unwrap();
            let (est, trace) = fit_bayes(&x, &p, &cfg, grid).unwrap();
            assert!((est.mean_density.integral() - 1.0).abs() < 1e-6, "{p:?}: {}", est.mean_density.integral());
            assert!(est.mean_density.values.iter().all(|&v| (0.0..=0.5 + 1e-12).contains(&v)));
            assert!(est.cdf_values.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(*est.cdf_values.last().unwrap(), 1.0);
            assert!(est.cdf_values[0] < 1e-8);
            assert_eq!(est.draws_used, cfg.kept_draws());
            assert_eq!(trace.rows.len(), cfg.iterations);
            assert!(est.ess > 0.0 && est.ess <= est.draws_used as f64 * (est.draws_used as f64).log10());
        }
    }

    #[test]
    fn streaming_matches_stored_draws() {
        let spec = GroundTruthSpec::finite(vec![-1.0, 1.5], vec![0.3, 0.7], 17);
        let x = sample(&spec, 20).unwrap().x;
        let p = DpPrior::default();
        let cfg = quick(300, 18);
        let grid = GridSpec::covering(-30.0, 30.0, 0.01).unwrap();
        let draws = run_chain(&x, &p, &cfg).unwrap();
        let a = bayes_estimates(&draws, &x, &p, grid).unwrap();
        let (b, _) = fit_bayes(&x, &p, &cfg, grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bayes_mixing_estimate_beats_empirical_law() {
        let spec = GroundTruthSpec::finite(vec![-2.0, 2.0], vec![0.5, 0.5], 19);
        let x = sample(&spec, 30).unwrap().x;
        let p = DpPrior::default();
        let cfg = McmcConfig {
            iterations: 4_000,
            burn_in: 1_000,
            seed: 20,
            ..Default::default()
        };
        let grid = default_grid(&x, &p, 1e-3).unwrap();
        let (est, _) = fit_bayes(&x, &p, &cfg, grid).unwrap();
        let truth = spec.mixing().unwrap().to_step_cdf();
        let empirical = DiscreteDistribution::from_unnormalized(x.clone(), vec![1.0; x.len()])
            .unwrap()
            .to_step_cdf();
        let bayes = w1_distance(&est.mean_cdf, &truth);
        let naive = w1_distance(&empirical, &truth);
        assert!(bayes < naive, "bayes {bayes} empirical {naive}");
    }

    fn mean_and_se(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / effective_sample_size(values)).sqrt())
    }

    #[test]
    fn posterior_mgf_contracts() {
        let p = DpPrior {
            total_mass: 1e-12,
            ..Default::default()
        };
        let draw = PosteriorSample {
            assignments: vec![0; 3],
            cluster_locations: vec![0.0],
            cluster_sizes: vec![3],
            loglik: 0.0,
        };
        for s in [-0.9, -0.2, 0.0, 0.5] {
            assert!((posterior_mgf(std::slice::from_ref(&draw), &[0.0; 3], &p, s).unwrap() - 1.0).abs() < 1e-9);
        }
        assert!(posterior_mgf(&[], &[0.0], &p, 0.1).is_err());
        let heavy = DpPrior {
            base_tau: 0.5,
            ..p
        };
        assert!(posterior_mgf(&[draw.clone()], &[0.0; 3], &heavy, 0.1).is_err());
        assert_eq!(posterior_mgf(&[draw], &[0.0; 3], &heavy, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn posterior_mgf_is_stable_under_chain_doubling() {
        let spec = GroundTruthSpec::finite(vec![0.0], vec![1.0], 21);
        let x = sample(&spec, 100).unwrap().x;
        let p = DpPrior::default();
        let short = McmcConfig { iterations: 4_000, burn_in: 1_000, seed: 22, ..Default::default() };
        let long = McmcConfig { iterations: 8_000, burn_in: 2_000, seed: 23, ..Default::default() };
        let a = posterior_mgf_draws(&run_chain(&x, &p, &short).unwrap(), &x, &p, 0.25).unwrap();
        let b = posterior_mgf_draws(&run_chain(&x, &p, &long).unwrap(), &x, &p, 0.25).unwrap();
        let ((ma, sa), (mb, sb)) = (mean_and_se(&a), mean_and_se(&b));
        assert!((ma - mb).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{ma}±{sa} vs {mb}±{sb}");
    }

    #[test]
    fn permuted_data_agree_within_monte_carlo_error() {
        let spec = GroundTruthSpec::finite(vec![-2.0, 2.0], vec![0.5, 0.5], 24);
        let x = sample(&spec, 40).unwrap().x;
        let mut rev = x.clone();
        rev.reverse();
        let p = DpPrior::default();
        let cfg = McmcConfig { iterations: 4_000, burn_in: 1_000, seed: 25, ..Default::default() };
        let stat = |draws: &[PosteriorSample]| -> Vec<f64> {
            draws
                .iter()
                .map(|d| {
                    d.cluster_locations
                        .iter()
                        .zip(&d.cluster_sizes)
                        .map(|(&l, &s)| l * s as f64)
                        .sum::<f64>()
                        / x.len() as f64
                })
                .collect()
        };
        let a = stat(&run_chain(&x, &p, &cfg).unwrap());
        let b = stat(&run_chain(&rev, &p, &cfg).unwrap());
        let ((ma, sa), (mb, sb)) = (mean_and_se(&a), mean_and_se(&b));
        assert!((ma - mb).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{ma}±{sa} vs {mb}±{sb}");
    }

    #[test]
    fn ess_oracles() {
        let mut rng = stream(26);
        let n = 20_000;
        let iid: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = effective_sample_size(&iid);
        assert!((e / n as f64 - 1.0).abs() < 0.1, "{e}");
        let phi: f64 = 0.9;
        let mut ar = vec![0.0; n];
        for t in 1..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            ar[t] = phi * ar[t - 1] + z;
        }
        let expected = n as f64 * (1.0 - phi) / (1.0 + phi);
        let e = effective_sample_size(&ar);
        assert!((e / expected - 1.0).abs() < 0.3, "{e} vs {expected}");
        assert_eq!(effective_sample_size(&[2.0; 50]), 50.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_base_cdf_is_monotone_and_symmetric(b in 0.2f64..3.0, tau in 0.2f64..=1.0, y in 0.0f64..30.0, dy in 0.0f64..5.0) {
            let p = DpPrior { total_mass: 1.0, base_b: b, base_tau: tau };
            prop_assert!(base_cdf(&p, y + dy) >= base_cdf(&p, y));
            prop_assert!((base_cdf(&p, y) + base_cdf(&p, -y) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn prop_sizes_sum_to_n(seed in 0u64..1000, n in 1usize..30) {
            let spec = GroundTruthSpec::finite(vec![-1.0, 3.0], vec![0.5, 0.5], seed);
            let x = sample(&spec, n).unwrap().x;
            let draws = run_chain(&x, &DpPrior::default(), &quick(40, seed)).unwrap();
            for d in draws {
                prop_assert_eq!(d.cluster_sizes.iter().sum::<usize>(), n);
                prop_assert!(d.cluster_sizes.iter().all(|&s| s > 0));
            }
        }
    }
}
