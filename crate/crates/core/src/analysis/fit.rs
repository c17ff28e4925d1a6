use serde::{Deserialize, Serialize};

use super::lm::{minimize, Bounds};
use super::reliability::ReliabilityBin;
use super::table::PredictionTable;
use crate::data::{SnrLevel, NUM_CLASSES};
use crate::error::{Error, Result};

const MAX_ITER: usize = 500;

/// Fit of `f(t) = (c - a) exp(-t / tau) + c` to a curve sampled at
/// `t = 0, 1, ..., T-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpFitResult {
    pub snr: Option<SnrLevel>,
    pub a: f64,
    pub c: f64,
    pub tau: f64,
    /// `f(inf) - f(0)`, which equals `a - c` for this form.
    pub increase: f64,
    /// Euclidean norm of the residuals.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ExpFitResult {
    pub fn eval(&self, t: f64) -> f64 {
        exp_model(self.a, self.c, self.tau, t)
    }
}

fn exp_model(a: f64, c: f64, tau: f64, t: f64) -> f64 {
    (c - a) * (-t / tau).exp() + c
}

pub fn fit_integration(curve: &[f64], snr: Option<SnrLevel>) -> Result<ExpFitResult> {
    if curve.len() < 3 {
        return Err(Error::invalid(format!("cannot fit three parameters to {} points", curve.len())));
    }
    if curve.iter().any(|y| !y.is_finite()) {
        return Err(Error::invalid("curve has a non-finite value"));
    }
    let n = curve.len() as f64;
    let c0 = curve[curve.len() - 1];
    let start = [2.0 * c0 - curve[0], c0, n / 5.0];
    let bounds = Bounds {
        lower: vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 1e-9 * n],
        upper: vec![f64::INFINITY, f64::INFINITY, 10.0 * n],
    };
    let out = minimize(
        &start,
        &bounds,
        MAX_ITER,
        |p| {
            curve
                .iter()
                .enumerate()
                .map(|(t, y)| exp_model(p[0], p[1], p[2], t as f64) - y)
                .collect()
        },
        |p| {
            (0..curve.len())
                .map(|t| {
                    let t = t as f64;
                    let e = (-t / p[2]).exp();
                    vec![-e, e + 1.0, (p[1] - p[0]) * e * t / (p[2] * p[2])]
                })
                .collect()
        },
    );
    let [a, c, tau] = [out.params[0], out.params[1], out.params[2]];
    Ok(ExpFitResult {
        snr,
        a,
        c,
        tau,
        increase: a - c,
        residual: out.sse.sqrt(),
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Fit of `log y = a (1 - p^c)` between mean predicted probability `p` and
/// fraction of positives `y` over reliability bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFit {
    pub a: f64,
    pub c: f64,
    /// Explained variance of `log y`.
    pub r2: f64,
    pub bins_used: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl CalibrationFit {
    /// Calibrated probability for raw probability `p`.
    pub fn map(&self, p: f64) -> f64 {
        (self.a * (1.0 - p.powf(self.c))).exp()
    }
}

/// Bins with no positives are floored at half a count before taking logs;
/// bins with a mean prediction of 0 are skipped.
pub fn fit_calibration(bins: &[ReliabilityBin]) -> Result<CalibrationFit> {
    let pts: Vec<(f64, f64)> = bins
        .iter()
        .filter(|b| b.count > 0 && b.mean_p > 0.0)
        .map(|b| {
            let y = if b.positives == 0 { 0.5 / b.count as f64 } else { b.fraction_positive };
            (b.mean_p.min(1.0), y.ln())
        })
        .collect();
    fit_calibration_points(&pts)
}

/// Same fit over `(p, log y)` pairs.
pub fn fit_calibration_points(pts: &[(f64, f64)]) -> Result<CalibrationFit> {
    if pts.len() < 3 {
        return Err(Error::invalid(format!("{} usable bins; calibration needs at least 3", pts.len())));
    }
    let sse_for = |c: f64| -> (f64, f64) {
        let (num, den) = pts.iter().fold((0.0, 0.0), |(n, d), &(p, ly)| {
            let g = 1.0 - p.powf(c);
            (n + g * ly, d + g * g)
        });
        let a = if den > 0.0 { num / den } else { 0.0 };
        let sse = pts.iter().map(|&(p, ly)| (a * (1.0 - p.powf(c)) - ly).powi(2)).sum();
        (a, sse)
    };
    let (mut best_c, mut best) = (1.0, sse_for(1.0));
    for i in 0..=200 {
        let c = 10f64.powf(-3.0 + 4.0 * i as f64 / 200.0);
        let cand = sse_for(c);
        if cand.1 < best.1 {
            best_c = c;
            best = cand;
        }
    }
    let bounds = Bounds {
        lower: vec![f64::NEG_INFINITY, 1e-9],
        upper: vec![f64::INFINITY, 1e3],
    };
    let out = minimize(
        &[best.0, best_c],
        &bounds,
        MAX_ITER,
        |q| pts.iter().map(|&(p, ly)| q[0] * (1.0 - p.powf(q[1])) - ly).collect(),
        |q| {
            pts.iter()
                .map(|&(p, _)| {
                    let pc = p.powf(q[1]);
                    vec![1.0 - pc, -q[0] * pc * p.ln()]
                })
                .collect()
        },
    );
    let mean = pts.iter().map(|x| x.1).sum::<f64>() / pts.len() as f64;
    let sst: f64 = pts.iter().map(|x| (x.1 - mean).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - out.sse / sst } else if out.sse == 0.0 { 1.0 } else { 0.0 };
    Ok(CalibrationFit {
        a: out.params[0],
        c: out.params[1],
        r2,
        bins_used: pts.len(),
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Maps every probability through the calibration curve and renormalizes
/// each row.
pub fn calibrate(table: &PredictionTable, fit: &CalibrationFit) -> PredictionTable {
    let mut out = table.clone();
    for row in out.probs.chunks_exact_mut(NUM_CLASSES) {
        for p in row.iter_mut() {
            *p = fit.map(*p);
        }
        let s: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= s;
        }
    }
    out
}
