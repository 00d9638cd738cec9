//! Replicated simulation studies and log-log rate fits.
//!
//! A plan fixes a true mixing law, a grid of sample sizes and a number of
//! replications. Every `(n, rep)` cell draws one sample from a seed derived
//! from the master seed, runs each selected estimator on it and scores the
//! estimates against the truth. Slopes of log median error against `log n`
//! summarize the rates.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::deconv::{deconv_cdf, deconv_density, nonnegative, DeconvConfig};
use crate::dp::{default_grid, fit_bayes, DpPrior, McmcConfig};
use crate::metrics::{w1_distance, DensityGrid, DensityMetrics, GridSpec, StepCdf};
use crate::model::{sample, DiscreteDistribution, GroundTruthSpec, MixtureDensity};
use crate::npmle::{fit, SolverConfig};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "LAPDECONV_WORKERS";

/// Fraction of invalid cells above which a run fails.
pub const MAX_INVALID_FRACTION: f64 = 0.1;

/// Spacing of the grids carrying Bayes estimates.
const BAYES_GRID_STEP: f64 = 1e-3;

/// Extra room around deconvolution grids for the convolved density.
const CONVOLUTION_PAD: f64 = 25.0;

const BAYES_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Npmle,
    Bayes,
    Deconv,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Npmle => "npmle",
            Estimator::Bayes => "bayes",
            Estimator::Deconv => "deconv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Hellinger,
    L1,
    L2,
    W1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Hellinger => "hellinger",
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::W1 => "w1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Its own seed is ignored; cell seeds come from `master_seed`.
    pub ground_truth: GroundTruthSpec,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub estimators: Vec<Estimator>,
    pub metrics: Vec<Metric>,
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub prior: DpPrior,
    /// Fixed chain length; by default `max(20000, 10 n)`.
    #[serde(default)]
    pub mcmc_iterations: Option<usize>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::param("n_grid", "needs at least one positive sample size"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("n_grid", "must be strictly increasing"));
        }
        if self.reps == 0 {
            return Err(Error::param("reps", "must be positive"));
        }
        if self.estimators.is_empty() {
            return Err(Error::param("estimators", "select at least one"));
        }
        if self.metrics.is_empty() {
            return Err(Error::param("metrics", "select at least one"));
        }
        if self.mcmc_iterations.is_some_and(|k| k < 2) {
            return Err(Error::param("mcmc_iterations", "must be at least 2"));
        }
        self.prior.validate()?;
        self.ground_truth.mixing()?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn cell_seed(&self, n: usize, rep: usize) -> u64 {
        derive_seed(self.master_seed, &[n as u64, rep as u64])
    }

    pub fn mcmc_config(&self, n: usize, seed: u64) -> McmcConfig {
        let iterations = self.mcmc_iterations.unwrap_or((10 * n).max(20_000));
        McmcConfig {
            iterations,
            burn_in: iterations / 4,
            seed: derive_seed(seed, &[BAYES_STREAM]),
            ..Default::default()
        }
    }

    fn selects(&self, e: Estimator) -> bool {
        self.estimators.contains(&e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub estimator: Estimator,
    pub metric: Metric,
    pub n: usize,
    pub rep: usize,
    /// NaN when `valid` is false.
    pub error: f64,
    pub seed: u64,
    pub valid: bool,
}

/// Ordinary least squares of `log y` on `log n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub r2: f64,
    /// One-sided p-value against `slope >= 0`.
    pub p_value: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeRow {
    pub estimator: String,
    pub metric: String,
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub r2: f64,
    pub p_value: f64,
    pub points: usize,
}

impl SlopeRow {
    fn new(estimator: &str, metric: &str, f: LineFit) -> Self {
        Self {
            estimator: estimator.into(),
            metric: metric.into(),
            slope: f.slope,
            intercept: f.intercept,
            stderr: f.stderr,
            r2: f.r2,
            p_value: f.p_value,
            points: f.points,
        }
    }
}

/// W1 between the Bayes and NPMLE mixing estimates of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MergingRow {
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub w1_bayes_npmle: f64,
    pub w1_bayes_truth: f64,
    pub w1_npmle_truth: f64,
    /// `w1_bayes_npmle <= w1_bayes_truth + w1_npmle_truth`.
    pub triangle: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RateTable {
    pub records: Vec<Record>,
    pub slopes: Vec<SlopeRow>,
    pub merging: Vec<MergingRow>,
    pub merging_slope: Option<SlopeRow>,
    pub invalid_cells: usize,
    pub total_cells: usize,
}

impl RateTable {
    /// Per-n medians of valid errors, in n order.
    pub fn medians(&self, estimator: Estimator, metric: Metric) -> Vec<(usize, f64)> {
        let mut groups: Vec<(usize, Vec<f64>)> = Vec::new();
        for r in self
            .records
            .iter()
            .filter(|r| r.estimator == estimator && r.metric == metric && r.valid)
        {
            match groups.iter_mut().find(|(n, _)| *n == r.n) {
                Some((_, v)) => v.push(r.error),
                None => groups.push((r.n, vec![r.error])),
            }
        }
        groups.sort_by_key(|(n, _)| *n);
        groups.into_iter().map(|(n, mut v)| (n, median(&mut v))).collect()
    }

    pub fn merging_medians(&self) -> Vec<(usize, f64)> {
        let mut ns: Vec<usize> = self.merging.iter().map(|m| m.n).collect();
        ns.dedup();
        ns.into_iter()
            .map(|n| {
                let mut v: Vec<f64> = self
                    .merging
                    .iter()
                    .filter(|m| m.n == n)
                    .map(|m| m.w1_bayes_npmle)
                    .collect();
                (n, median(&mut v))
            })
            .collect()
    }

    pub fn slope(&self, estimator: Estimator, metric: Metric) -> Option<&SlopeRow> {
        self.slopes
            .iter()
            .find(|s| s.estimator == estimator.name() && s.metric == metric.name())
    }

    pub fn write_records_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(w, &self.records)
    }

    pub fn write_slopes_csv<W: Write>(&self, w: W) -> Result<()> {
        let rows: Vec<&SlopeRow> = self.slopes.iter().chain(&self.merging_slope).collect();
        write_rows(w, &rows)
    }

    pub fn write_merging_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(w, &self.merging)
    }

    /// `records.csv`, `slopes.csv`, `merging.csv` (when present) and
    /// `plan.echo.json` under `dir`.
    pub fn write_outputs(&self, plan: &ExperimentPlan, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_records_csv(fs::File::create(dir.join("records.csv"))?)?;
        self.write_slopes_csv(fs::File::create(dir.join("slopes.csv"))?)?;
        if !self.merging.is_empty() {
            self.write_merging_csv(fs::File::create(dir.join("merging.csv"))?)?;
        }
        fs::write(dir.join("plan.echo.json"), serde_json::to_string_pretty(plan)?)?;
        Ok(())
    }
}

fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// OLS of `log y` on `log n`; needs four distinct positive points.
pub fn fit_log_log(points: &[(usize, f64)]) -> Result<LineFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(n, y)| *n > 0 && *y > 0.0 && y.is_finite())
        .map(|&(n, y)| ((n as f64).ln(), y.ln()))
        .collect();
    let mut distinct: Vec<f64> = usable.iter().map(|p| p.0).collect();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::InsufficientPoints {
            needed: 4,
            got: distinct.len(),
        });
    }
    let k = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / k;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = usable.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = usable
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        .max(0.0);
    let df = k - 2.0;
    let stderr = (sse / df / sxx).sqrt();
    let r2 = if syy > 0.0 { (1.0 - sse / syy).clamp(0.0, 1.0) } else { 0.0 };
    let p_value = if stderr > 0.0 {
        StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::param("df", e.to_string()))?
            .cdf(slope / stderr)
    } else if slope < 0.0 {
        0.0
    } else if slope > 0.0 {
        1.0
    } else {
        0.5
    };
    Ok(LineFit {
        slope,
        intercept,
        stderr,
        r2,
        p_value,
        points: usable.len(),
    })
}

/// Slope of log median error against `log n` for one estimator and metric.
pub fn fit_slope(records: &[Record], estimator: Estimator, metric: Metric) -> Result<LineFit> {
    let table = RateTable {
        records: records.to_vec(),
        ..Default::default()
    };
    fit_log_log(&table.medians(estimator, metric))
}

struct Truth {
    density: MixtureDensity,
    cdf: StepCdf,
}

enum DensityEstimate {
    Mixture(MixtureDensity),
    Grid(DensityGrid),
}

struct Estimate {
    mixing: StepCdf,
    density: DensityEstimate,
}

fn estimate(e: Estimator, x: &[f64], plan: &ExperimentPlan, seed: u64) -> Result<Estimate> {
    match e {
        Estimator::Npmle => {
            let r = fit(x, &SolverConfig::for_data(x))?;
            if !r.converged {
                return Err(Error::NotConverged {
                    iterations: r.iterations,
                });
            }
            Ok(Estimate {
                mixing: r.g_hat.to_step_cdf(),
                density: DensityEstimate::Mixture(MixtureDensity::new(r.g_hat)),
            })
        }
        Estimator::Bayes => {
            let grid = default_grid(x, &plan.prior, BAYES_GRID_STEP)?;
            let (est, _) = fit_bayes(x, &plan.prior, &plan.mcmc_config(x.len(), seed), grid)?;
            Ok(Estimate {
                mixing: est.mean_cdf,
                density: DensityEstimate::Grid(est.mean_density),
            })
        }
        Estimator::Deconv => {
            let mut cfg = DeconvConfig::for_data(x)?;
            let extra = (CONVOLUTION_PAD / cfg.grid.step).ceil() as usize;
            cfg.grid = GridSpec {
                lo: cfg.grid.lo - extra as f64 * cfg.grid.step,
                step: cfg.grid.step,
                len: cfg.grid.len + 2 * extra,
            };
            let g = nonnegative(&deconv_density(x, &cfg)?)?;
            Ok(Estimate {
                mixing: deconv_cdf(x, &cfg)?.cdf,
                density: DensityEstimate::Grid(g.convolve_laplace()),
            })
        }
    }
}

fn score(est: &Estimate, metric: Metric, truth: &Truth) -> Result<f64> {
    if metric == Metric::W1 {
        return Ok(w1_distance(&est.mixing, &truth.cdf));
    }
    match &est.density {
        DensityEstimate::Mixture(m) => density_metric(m, &truth.density, metric),
        DensityEstimate::Grid(g) => {
            let p0 = DensityGrid::new(g.grid, truth.density.pdf_sorted(&g.points()))?;
            density_metric(g, &p0, metric)
        }
    }
}

fn density_metric<D: DensityMetrics>(p: &D, q: &D, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Hellinger => p.hellinger(q),
        Metric::L1 => p.l1(q),
        Metric::L2 => p.l2(q),
        Metric::W1 => unreachable!("handled by the caller"),
    }
}

struct CellResult {
    n: usize,
    rep: usize,
    seed: u64,
    /// Per selected estimator: per metric errors, or the failure.
    scores: Vec<(Estimator, Result<Vec<f64>>)>,
    merging: Option<MergingRow>,
}

fn run_cell(plan: &ExperimentPlan, truth: &Truth, n: usize, rep: usize) -> CellResult {
    let seed = plan.cell_seed(n, rep);
    let data = sample(&plan.ground_truth.with_seed(seed), n);
    let mut scores = Vec::new();
    let mut mixings: Vec<(Estimator, StepCdf, f64)> = Vec::new();
    for &e in &plan.estimators {
        let outcome = data.as_ref().map_err(|err| Error::NotApplicable(err.to_string())).and_then(|d| {
            let est = estimate(e, &d.x, plan, seed)?;
            let errors = plan
                .metrics
                .iter()
                .map(|&m| score(&est, m, truth))
                .collect::<Result<Vec<f64>>>()?;
            mixings.push((e, est.mixing.clone(), w1_distance(&est.mixing, &truth.cdf)));
            Ok(errors)
        });
        scores.push((e, outcome));
    }
    let find = |e: Estimator| mixings.iter().find(|m| m.0 == e);
    let merging = match (find(Estimator::Bayes), find(Estimator::Npmle)) {
        (Some(b), Some(m)) => {
            let w1_bayes_npmle = w1_distance(&b.1, &m.1);
            Some(MergingRow {
                n,
                rep,
                seed,
                w1_bayes_npmle,
                w1_bayes_truth: b.2,
                w1_npmle_truth: m.2,
                triangle: w1_bayes_npmle <= b.2 + m.2 + 1e-12,
            })
        }
        _ => None,
    };
    CellResult {
        n,
        rep,
        seed,
        scores,
        merging,
    }
}

fn too_many_invalid(invalid: usize, total: usize) -> bool {
    invalid as f64 > MAX_INVALID_FRACTION * total as f64
}

fn with_workers<T: Send>(job: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(k) if k > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::param("workers", e.to_string()))?;
            Ok(pool.install(job))
        }
        _ => Ok(job()),
    }
}

/// Runs every cell of the plan, fits slopes and writes the outputs when
/// `output_dir` is set. Fails when more than a tenth of the cells are
/// invalid; the outputs are still written in that case.
pub fn run(plan: &ExperimentPlan) -> Result<RateTable> {
    plan.validate()?;
    let mixing: DiscreteDistribution = plan.ground_truth.mixing()?;
    let truth = Truth {
        cdf: mixing.to_step_cdf(),
        density: MixtureDensity::new(mixing),
    };
    let cells: Vec<(usize, usize)> = plan
        .n_grid
        .iter()
        .flat_map(|&n| (0..plan.reps).map(move |rep| (n, rep)))
        .collect();
    let results: Vec<CellResult> = with_workers(|| {
        cells
            .par_iter()
            .map(|&(n, rep)| run_cell(plan, &truth, n, rep))
            .collect()
    })?;

    let mut table = RateTable {
        total_cells: cells.len() * plan.estimators.len(),
        ..Default::default()
    };
    let mut estimators = plan.estimators.clone();
    estimators.sort();
    estimators.dedup();
    let mut metrics = plan.metrics.clone();
    metrics.sort();
    metrics.dedup();
    for &e in &estimators {
        for &m in &metrics {
            for cell in &results {
                let (_, outcome) = cell.scores.iter().find(|s| s.0 == e).expect("every cell scores every estimator");
                let error = match outcome {
                    Ok(errors) => errors[plan.metrics.iter().position(|&pm| pm == m).expect("selected metric")],
                    Err(_) => f64::NAN,
                };
                table.records.push(Record {
                    estimator: e,
                    metric: m,
                    n: cell.n,
                    rep: cell.rep,
                    error,
                    seed: cell.seed,
                    valid: outcome.is_ok(),
                });
            }
        }
    }
    table.invalid_cells = results
        .iter()
        .map(|c| c.scores.iter().filter(|s| s.1.is_err()).count())
        .sum();
    for &e in &estimators {
        for &m in &metrics {
            if let Ok(f) = fit_log_log(&table.medians(e, m)) {
                table.slopes.push(SlopeRow::new(e.name(), m.name(), f));
            }
        }
    }
    table.merging = results.iter().filter_map(|c| c.merging).collect();
    if !table.merging.is_empty() {
        table.merging_slope = fit_log_log(&table.merging_medians())
            .ok()
            .map(|f| SlopeRow::new("bayes-vs-npmle", Metric::W1.name(), f));
    }
    if let Some(dir) = &plan.output_dir {
        table.write_outputs(plan, dir)?;
    }
    if too_many_invalid(table.invalid_cells, table.total_cells) {
        return Err(Error::TooManyInvalidCells {
            invalid: table.invalid_cells,
            total: table.total_cells,
        });
    }
    Ok(table)
}

/// W1 between the Bayes and NPMLE mixing estimates in every cell, with
/// the fitted slope of its per-n medians.
pub fn merging_study(plan: &ExperimentPlan) -> Result<(Vec<MergingRow>, Option<SlopeRow>)> {
    if !(plan.selects(Estimator::Npmle) && plan.selects(Estimator::Bayes)) {
        return Err(Error::param("estimators", "merging needs both npmle and bayes"));
    }
    let restricted = ExperimentPlan {
        estimators: vec![Estimator::Npmle, Estimator::Bayes],
        metrics: vec![Metric::W1],
        ..plan.clone()
    };
    let table = run(&restricted)?;
    Ok((table.merging, table.merging_slope))
}
