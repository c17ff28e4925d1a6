//! Analysis of per-frame model outputs: Bayesian folding, accuracy over
//! frames, integration-time fits, false rejection, reliability, calibration
//! and confidence distributions.

pub mod accuracy;
pub mod bayes;
pub mod fit;
pub mod lm;
pub mod rejection;
pub mod reliability;
pub mod report;
pub mod table;

pub use accuracy::{accuracy_curve, argmax, AccuracyCurve};
pub use bayes::{bayes_over_frames, bayes_update};
pub use fit::{calibrate, fit_calibration, fit_calibration_points, fit_integration, CalibrationFit, ExpFitResult};
pub use rejection::{false_rejection_rate, rejection_from_pool, RejectionRate, DEFAULT_REJECTION_PERCENTILE};
pub use reliability::{
    bins_from_pool, confidence_cdf, pooled_predictions, reliability_bins, ConfidenceCdf, ReliabilityBin, Which,
    RELIABILITY_BINS,
};
pub use report::{build_report, AnalysisReport, ReportOptions};
pub use table::PredictionTable;
