//! Aggregated analysis of one or more prediction tables, written as
//! `report.json` plus one CSV per section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::accuracy::{accuracy_curve, AccuracyCurve};
use super::fit::{calibrate, fit_calibration, fit_integration, CalibrationFit, ExpFitResult};
use super::rejection::{false_rejection_rate, RejectionRate, DEFAULT_REJECTION_PERCENTILE};
use super::reliability::{confidence_cdf, reliability_bins, ReliabilityBin, Which};
use super::table::PredictionTable;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub rejection_percentiles: Vec<f64>,
    /// Frame used for reliability, calibration and CDFs; `None` is the last.
    pub calibration_frame: Option<usize>,
    pub cdf_above: Vec<f64>,
    pub cdf_below: Vec<f64>,
    /// CDF sample points between 0 and 1.
    pub cdf_points: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            rejection_percentiles: vec![DEFAULT_REJECTION_PERCENTILE],
            calibration_frame: None,
            cdf_above: vec![0.4],
            cdf_below: vec![0.01],
            cdf_points: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCurves {
    pub model: String,
    pub train_set: String,
    pub seeds: Vec<u64>,
    pub curves: Vec<AccuracyCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFits {
    pub model: String,
    pub train_set: String,
    pub bayes: bool,
    pub fits: Vec<ExpFitResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRejection {
    pub model: String,
    pub train_set: String,
    pub rates: Vec<RejectionRate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelReliability {
    pub model: String,
    pub train_set: String,
    pub frame: usize,
    pub calibrated: bool,
    pub bins: Vec<ReliabilityBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCalibration {
    pub model: String,
    pub train_set: String,
    pub frame: usize,
    pub fit: Option<CalibrationFit>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub x: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCdf {
    pub model: String,
    pub train_set: String,
    pub frame: usize,
    pub calibrated: bool,
    pub which: Which,
    pub samples: usize,
    /// `(x, fraction <= x)`
    pub points: Vec<(f64, f64)>,
    pub above: Vec<Threshold>,
    pub below: Vec<Threshold>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisReport {
    pub accuracy_curves: Vec<ModelCurves>,
    pub exp_fits: Vec<ModelFits>,
    pub rejection_rates: Vec<ModelRejection>,
    pub reliability: Vec<ModelReliability>,
    pub calibration: Vec<ModelCalibration>,
    pub cdf: Vec<ModelCdf>,
    /// Sections or inputs that could not be produced.
    #[serde(default)]
    pub gaps: Vec<String>,
}

/// One table per (model, training set), already pooled across seeds.
pub fn build_report(tables: &[PredictionTable], opts: &ReportOptions) -> Result<AnalysisReport> {
    let mut r = AnalysisReport::default();
    for t in tables {
        let id = || (t.model.clone(), t.train_set.clone());
        for bayes in [false, true] {
            let curves = accuracy_curve(t, bayes)?;
            let fits = curves
                .iter()
                .filter(|c| c.percent.len() >= 3)
                .map(|c| fit_integration(&c.percent, Some(c.snr)))
                .collect::<Result<Vec<_>>>()?;
            let (model, train_set) = id();
            r.exp_fits.push(ModelFits {
                model,
                train_set,
                bayes,
                fits,
            });
            let (model, train_set) = id();
            r.accuracy_curves.push(ModelCurves {
                model,
                train_set,
                seeds: t.seeds.clone(),
                curves,
            });
        }

        let mut rates = Vec::new();
        for &pct in &opts.rejection_percentiles {
            for frame in 0..t.frames {
                rates.extend(false_rejection_rate(t, frame, pct)?);
            }
        }
        let (model, train_set) = id();
        r.rejection_rates.push(ModelRejection { model, train_set, rates });

        let frame = opts.calibration_frame.unwrap_or(t.frames.saturating_sub(1));
        let bins = reliability_bins(t, frame)?;
        let fit = fit_calibration(&bins);
        let (model, train_set) = id();
        r.reliability.push(ModelReliability {
            model,
            train_set,
            frame,
            calibrated: false,
            bins: bins.clone(),
        });
        let (model, train_set) = id();
        r.calibration.push(ModelCalibration {
            model,
            train_set,
            frame,
            fit: fit.as_ref().ok().cloned(),
            error: fit.as_ref().err().map(|e| e.to_string()),
        });

        let mut views = vec![(false, t.clone())];
        if let Ok(f) = &fit {
            let cal = calibrate(t, f);
            let (model, train_set) = id();
            r.reliability.push(ModelReliability {
                model,
                train_set,
                frame,
                calibrated: true,
                bins: reliability_bins(&cal, frame)?,
            });
            views.push((true, cal));
        }
        for (calibrated, view) in &views {
            for which in [Which::Positive, Which::Negative] {
                let cdf = confidence_cdf(view, frame, which)?;
                let n = opts.cdf_points.max(2);
                let points = (0..n)
                    .map(|i| {
                        let x = i as f64 / (n - 1) as f64;
                        (x, cdf.at(x))
                    })
                    .collect();
                let (model, train_set) = id();
                r.cdf.push(ModelCdf {
                    model,
                    train_set,
                    frame,
                    calibrated: *calibrated,
                    which,
                    samples: cdf.len(),
                    points,
                    above: opts
                        .cdf_above
                        .iter()
                        .map(|&x| Threshold { x, fraction: cdf.fraction_above(x) })
                        .collect(),
                    below: opts
                        .cdf_below
                        .iter()
                        .map(|&x| Threshold { x, fraction: cdf.fraction_below(x) })
                        .collect(),
                });
            }
        }
    }
    Ok(r)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::invalid(format!("writing {}: {e}", path.display()))
}

fn write_rows<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Writes `report.json` and the CSV sidecars into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;

        #[derive(Serialize)]
        struct Acc<'a> {
            model: &'a str,
            train_set: &'a str,
            snr: String,
            bayes: bool,
            frame: usize,
            percent: f64,
        }
        write_rows(
            &dir.join("accuracy_curves.csv"),
            self.accuracy_curves.iter().flat_map(|m| {
                m.curves.iter().flat_map(move |c| {
                    c.percent.iter().enumerate().map(move |(frame, &percent)| Acc {
                        model: &m.model,
                        train_set: &m.train_set,
                        snr: c.snr.to_string(),
                        bayes: c.bayes,
                        frame,
                        percent,
                    })
                })
            }),
        )?;

        #[derive(Serialize)]
        struct Fit<'a> {
            model: &'a str,
            train_set: &'a str,
            bayes: bool,
            snr: String,
            a: f64,
            c: f64,
            tau: f64,
            increase: f64,
            residual: f64,
            converged: bool,
        }
        write_rows(
            &dir.join("exp_fits.csv"),
            self.exp_fits.iter().flat_map(|m| {
                m.fits.iter().map(move |f| Fit {
                    model: &m.model,
                    train_set: &m.train_set,
                    bayes: m.bayes,
                    snr: f.snr.map(|s| s.to_string()).unwrap_or_default(),
                    a: f.a,
                    c: f.c,
                    tau: f.tau,
                    increase: f.increase,
                    residual: f.residual,
                    converged: f.converged,
                })
            }),
        )?;

        #[derive(Serialize)]
        struct Rej<'a> {
            model: &'a str,
            train_set: &'a str,
            snr: String,
            frame: usize,
            percentile: f64,
            rate: f64,
            rejected: usize,
            pool: usize,
        }
        write_rows(
            &dir.join("rejection_rates.csv"),
            self.rejection_rates.iter().flat_map(|m| {
                m.rates.iter().map(move |r| Rej {
                    model: &m.model,
                    train_set: &m.train_set,
                    snr: r.snr.to_string(),
                    frame: r.frame,
                    percentile: r.percentile,
                    rate: r.rate,
                    rejected: r.rejected,
                    pool: r.pool,
                })
            }),
        )?;

        #[derive(Serialize)]
        struct Rel<'a> {
            model: &'a str,
            train_set: &'a str,
            frame: usize,
            calibrated: bool,
            lo_percentile: f64,
            hi_percentile: f64,
            mean_p: f64,
            fraction_positive: f64,
            count: usize,
            positives: usize,
        }
        write_rows(
            &dir.join("reliability.csv"),
            self.reliability.iter().flat_map(|m| {
                m.bins.iter().map(move |b| Rel {
                    model: &m.model,
                    train_set: &m.train_set,
                    frame: m.frame,
                    calibrated: m.calibrated,
                    lo_percentile: b.lo_percentile,
                    hi_percentile: b.hi_percentile,
                    mean_p: b.mean_p,
                    fraction_positive: b.fraction_positive,
                    count: b.count,
                    positives: b.positives,
                })
            }),
        )?;

        #[derive(Serialize)]
        struct Cal<'a> {
            model: &'a str,
            train_set: &'a str,
            frame: usize,
            a: Option<f64>,
            c: Option<f64>,
            r2: Option<f64>,
            error: &'a str,
        }
        write_rows(
            &dir.join("calibration.csv"),
            self.calibration.iter().map(|m| Cal {
                model: &m.model,
                train_set: &m.train_set,
                frame: m.frame,
                a: m.fit.as_ref().map(|f| f.a),
                c: m.fit.as_ref().map(|f| f.c),
                r2: m.fit.as_ref().map(|f| f.r2),
                error: m.error.as_deref().unwrap_or(""),
            }),
        )?;

        #[derive(Serialize)]
        struct Cdf<'a> {
            model: &'a str,
            train_set: &'a str,
            frame: usize,
            calibrated: bool,
            which: Which,
            x: f64,
            cdf: f64,
        }
        write_rows(
            &dir.join("cdf.csv"),
            self.cdf.iter().flat_map(|m| {
                m.points.iter().map(move |&(x, cdf)| Cdf {
                    model: &m.model,
                    train_set: &m.train_set,
                    frame: m.frame,
                    calibrated: m.calibrated,
                    which: m.which,
                    x,
                    cdf,
                })
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SnrLevel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(model: &str, seed: u64) -> PredictionTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (items, reps, frames) = (60, 2, 5);
        let labels: Vec<usize> = (0..items).map(|i| i % 10).collect();
        let snr: Vec<SnrLevel> = (0..items)
            .map(|i| if i < 30 { SnrLevel::inverse(4) } else { SnrLevel::whole(1) })
            .collect();
        let mut probs = Vec::new();
        for i in 0..items {
            for _ in 0..reps {
                for f in 0..frames {
                    let boost = if i < 30 { 0.2 } else { 0.5 } * (1.0 + f as f64);
                    let logits: Vec<f64> = (0..10)
                        .map(|k| if k == labels[i] { boost } else { 0.0 } + rng.random::<f64>())
                        .collect();
                    let z: f64 = logits.iter().map(|x| x.exp()).sum();
                    probs.extend(logits.iter().map(|x| x.exp() / z));
                }
            }
        }
        PredictionTable::new(model, vec![seed], "default", reps, frames, labels, snr, probs).unwrap()
    }

    #[test]
    fn report_has_every_section_and_round_trips() {
        let tables = [table("ccnn", 1), table("grucnn", 2)];
        let r = build_report(&tables, &ReportOptions::default()).unwrap();
        assert_eq!(r.accuracy_curves.len(), 4);
        assert_eq!(r.exp_fits.len(), 4);
        assert_eq!(r.exp_fits[0].fits.len(), 2);
        assert_eq!(r.rejection_rates[0].rates.len(), 10);
        assert!(r.calibration.iter().all(|c| c.fit.is_some()));
        assert_eq!(r.reliability.len(), 4);
        assert_eq!(r.cdf.len(), 8);
        let json = r.to_json().unwrap();
        for key in ["accuracy_curves", "exp_fits", "rejection_rates", "reliability", "calibration", "cdf"] {
            assert!(json.contains(&format!("\"{key}\"")), "{key}");
        }
        let back = AnalysisReport::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back, r);
        let bad = json.replacen("\"cdf\"", "\"cdfs\"", 1);
        assert!(AnalysisReport::from_json(&bad).is_err());

        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        for f in ["report.json", "accuracy_curves.csv", "exp_fits.csv", "rejection_rates.csv", "reliability.csv", "calibration.csv", "cdf.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let acc = std::fs::read_to_string(dir.path().join("accuracy_curves.csv")).unwrap();
        assert!(acc.starts_with("model,train_set,snr,bayes,frame,percent"));
        assert_eq!(acc.lines().count(), 1 + 2 * 2 * 2 * 5);
    }
}
