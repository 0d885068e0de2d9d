//! Evaluation and trustworthiness analyses over per-case records.
//!
//! Everything here is a pure function of an immutable slice of
//! [`EvalRecord`]s, except [`ood_report`] which runs a checkpoint.
//! Randomised analyses take an explicit seed.

mod bootstrap;
mod curves;
mod decision;
mod export;
mod metrics;
mod ood;
mod stats;

use serde::{Deserialize, Serialize};

use crate::memory::NUM_GRADES;
use crate::model::{ModelError, Prediction};

pub use bootstrap::{bootstrap_band, pr_band, roc_band, unit_grid, BandedCurve, BootstrapBand, GRID_POINTS};
pub use curves::{pr_curve, reliability, roc, PrCurve, Reliability, ReliabilityBin, RocCurve};
pub use decision::{
    cost_profile, default_referral_grid, default_thresholds, net_benefit, rejection_curve, rejection_grid, retained_accuracy, DecisionCurves,
};
pub use export::{fmt_sig, write_csv, write_ood_csv, write_report, Report, ReportOptions, Summary};
pub use metrics::{confusion_matrix, error_distribution, ordinal_metrics, qwk, Confusion, OrdinalMetrics};
pub use ood::{ood_report, ood_rows, OodRow};
pub use stats::{mann_whitney_greater, normal_sf, uncertainty_separation, MannWhitney, Separation};

/// Grades at or above this are "positive" for the binary endpoint.
pub const OA_GRADE: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum TrustError {
    #[error("{0}: no records")]
    Empty(&'static str),
    #[error("{op}: length mismatch ({left} vs {right})")]
    LengthMismatch { op: &'static str, left: usize, right: usize },
    #[error("{op}: need at least {min} items, got {got}")]
    TooFew { op: &'static str, min: usize, got: usize },
    #[error("grade {0} outside 0..{NUM_GRADES}")]
    Label(usize),
    #[error("invalid record: {0}")]
    Record(String),
    #[error("{0}: both positive and negative cases are required")]
    SingleClass(&'static str),
    #[error("{0}: no positive cases")]
    NoPositives(&'static str),
    #[error("{0}: both groups must be nonempty")]
    EmptyGroup(&'static str),
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("grid must be strictly increasing within [0, 1]")]
    Grid,
    #[error("bootstrap gave up after {0} attempts without enough non-degenerate resamples")]
    Degenerate(usize),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One evaluated case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub y_true: usize,
    pub gamma: f64,
    pub grade_pred: usize,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub prob_oa: f64,
}

impl EvalRecord {
    pub fn new(y_true: usize, gamma: f64, grade_pred: usize, epistemic: f64, aleatoric: f64, prob_oa: f64) -> Result<Self, TrustError> {
        let r = Self { y_true, gamma, grade_pred, epistemic, aleatoric, prob_oa };
        r.validate()?;
        Ok(r)
    }

    pub fn from_prediction(y_true: usize, p: &Prediction) -> Result<Self, TrustError> {
        Self::new(y_true, p.gamma, p.grade, p.epistemic, p.aleatoric, p.prob_oa)
    }

    pub fn validate(&self) -> Result<(), TrustError> {
        for g in [self.y_true, self.grade_pred] {
            if g >= NUM_GRADES {
                return Err(TrustError::Label(g));
            }
        }
        if !(0.0..=1.0).contains(&self.prob_oa) {
            return Err(TrustError::Record(format!("prob_oa {} outside [0, 1]", self.prob_oa)));
        }
        if !(self.epistemic > 0.0) || !(self.aleatoric > 0.0) || !self.gamma.is_finite() {
            return Err(TrustError::Record("uncertainties must be positive and γ finite".into()));
        }
        Ok(())
    }

    pub fn positive(&self) -> bool {
        self.y_true >= OA_GRADE
    }

    pub fn predicted_positive(&self) -> bool {
        self.grade_pred >= OA_GRADE
    }

    pub fn correct(&self) -> bool {
        self.y_true == self.grade_pred
    }
}

/// Cost model for the referral analysis (arbitrary currency unit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub review: f64,
    pub ai: f64,
    pub false_negative: f64,
    pub false_positive: f64,
    /// Probability a referred case is still resolved wrongly.
    pub clinician_error_rate: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self { review: 10.0, ai: 0.2, false_negative: 100.0, false_positive: 20.0, clinician_error_rate: 0.0 }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), TrustError> {
        let all = [self.review, self.ai, self.false_negative, self.false_positive];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(TrustError::Param("costs must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.clinician_error_rate) {
            return Err(TrustError::Param("clinician error rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A curve on a strictly increasing x grid with optional bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl CurveSeries {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        Self { x, y, lower: None, upper: None }
    }

    /// Checks the grid is strictly increasing and that bands bracket `y`.
    pub fn validate(&self) -> Result<(), TrustError> {
        if self.x.len() != self.y.len() {
            return Err(TrustError::LengthMismatch { op: "curve", left: self.x.len(), right: self.y.len() });
        }
        if self.x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(TrustError::Grid);
        }
        for band in [&self.lower, &self.upper].into_iter().flatten() {
            if band.len() != self.y.len() {
                return Err(TrustError::LengthMismatch { op: "curve band", left: band.len(), right: self.y.len() });
            }
        }
        if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
            if lo.iter().zip(&self.y).zip(hi).any(|((l, y), h)| l > y || y > h) {
                return Err(TrustError::Param("band does not bracket the curve".into()));
            }
        }
        Ok(())
    }
}

pub(crate) fn require_nonempty(records: &[EvalRecord], op: &'static str) -> Result<(), TrustError> {
    if records.is_empty() {
        return Err(TrustError::Empty(op));
    }
    Ok(())
}

/// Percentile with linear interpolation between order statistics.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Indices ordered by descending epistemic uncertainty, ties by index.
pub(crate) fn by_uncertainty(records: &[EvalRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[b].epistemic.total_cmp(&records[a].epistemic).then(a.cmp(&b)));
    idx
}

/// `⌈r·n⌉`, robust to the rounding error of `r·n` on grid values.
pub(crate) fn ceil_count(r: f64, n: usize) -> usize {
    let x = r * n as f64;
    let k = (x - 1e-9 * n.max(1) as f64).ceil().max(0.0) as usize;
    k.min(n)
}
