use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{DensityMetrics, wp_distance};
use crate::model::{DiscreteDistribution, MixtureDensity};
use crate::{Error, Result};

/// Slack below which an inequality counts as violated.
pub const SLACK_TOL: f64 = 1e-10;
/// Supremum of the standard Laplace density.
const LAPLACE_SUP: f64 = 0.5;
/// Fourier decay degree of the standard Laplace density.
const LAPLACE_BETA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InequalityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub slack: f64,
}

impl InequalityReport {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        let slack = rhs - lhs;
        Self {
            lhs,
            rhs,
            satisfied: slack >= -SLACK_TOL,
            slack,
        }
    }
}

/// `||p1 - p2||_2^2 <= 4 ||f||_inf h^2(p1, p2)` for Laplace mixtures.
pub fn l2_hellinger_bound_check(m1: &MixtureDensity, m2: &MixtureDensity) -> Result<InequalityReport> {
    let l2 = m1.l2(m2)?;
    let h = m1.hellinger(m2)?;
    Ok(InequalityReport::new(l2 * l2, 4.0 * LAPLACE_SUP * h * h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    L2,
    Hellinger,
}

impl DistanceKind {
    pub fn name(&self) -> &'static str {
        match self {
            DistanceKind::L2 => "l2",
            DistanceKind::Hellinger => "hellinger",
        }
    }
}

/// Outcome of one inversion-inequality evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InversionReport {
    pub p: f64,
    pub kind: DistanceKind,
    /// Density-level distance between the two mixtures.
    pub d: f64,
    /// `W_p / (d^{1/(p+beta)} log(1/d)^{(p+1/2)/(p+beta)})`; absent when `d = 0`.
    pub implied_constant: Option<f64>,
    pub report: InequalityReport,
}

fn rate_factor(d: f64, p: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    let e = p + LAPLACE_BETA;
    d.powf(1.0 / e) * (1.0 / d).ln().powf((p + 0.5) / e)
}

/// Compares `W_p(g1, g2)` with `constant * d^{1/(p+2)} log(1/d)^{(p+1/2)/(p+2)}`
/// where `d` is the L2 or Hellinger distance between the Laplace mixtures.
///
/// Finite discrete inputs have bounded support, so their moment generating
/// functions are finite everywhere. Returns [`Error::NotApplicable`] when
/// `d >= 1/e`, outside the small-distance regime of the bound.
pub fn inversion_inequality_check(
    g1: &DiscreteDistribution,
    g2: &DiscreteDistribution,
    p: f64,
    kind: DistanceKind,
    constant: f64,
) -> Result<InversionReport> {
    let w = wp_distance(&g1.to_step_cdf(), &g2.to_step_cdf(), p)?;
    let (m1, m2) = (MixtureDensity::new(g1.clone()), MixtureDensity::new(g2.clone()));
    let d = match kind {
        DistanceKind::L2 => m1.l2(&m2)?,
        DistanceKind::Hellinger => m1.hellinger(&m2)?,
    };
    if d >= (-1.0f64).exp() {
        return Err(Error::NotApplicable(format!(
            "{} distance {d} is not below 1/e",
            kind.name()
        )));
    }
    let factor = rate_factor(d, p);
    let implied_constant = (d > 0.0).then(|| w / factor);
    Ok(InversionReport {
        p,
        kind,
        d,
        implied_constant,
        report: InequalityReport::new(w, constant * factor),
    })
}

/// Runs the check along `g_eps = (1 - eps) delta_0 + eps delta_1` against
/// `delta_0` for every `eps`.
pub fn perturbation_sweep(
    eps: &[f64],
    p: f64,
    kind: DistanceKind,
    constant: f64,
) -> Result<Vec<(f64, InversionReport)>> {
    let base = DiscreteDistribution::dirac(0.0);
    eps.iter()
        .map(|&e| {
            let g = DiscreteDistribution::new(vec![0.0, 1.0], vec![1.0 - e, e])?;
            Ok((e, inversion_inequality_check(&base, &g, p, kind, constant)?))
        })
        .collect()
}

/// CSV with columns `inputs,lhs,rhs,slack,satisfied`.
pub fn write_inequality_csv<W: Write>(w: W, rows: &[(String, InequalityReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["inputs", "lhs", "rhs", "slack", "satisfied"])?;
    for (inputs, r) in rows {
        out.write_record([
            inputs.clone(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.slack.to_string(),
            r.satisfied.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// CSV with columns `eps,p,d_kind,d,lhs,rhs,slack,implied_constant`.
pub fn write_inversion_csv<W: Write>(w: W, rows: &[(f64, InversionReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["eps", "p", "d_kind", "d", "lhs", "rhs", "slack", "implied_constant"])?;
    for (eps, r) in rows {
        out.write_record([
            eps.to_string(),
            r.p.to_string(),
            r.kind.name().to_string(),
            r.d.to_string(),
            r.report.lhs.to_string(),
            r.report.rhs.to_string(),
            r.report.slack.to_string(),
            r.implied_constant.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
