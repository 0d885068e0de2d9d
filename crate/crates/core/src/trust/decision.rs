//! Selective prediction, decision curves and referral cost profiles.

use serde::{Deserialize, Serialize};

use super::{by_uncertainty, ceil_count, require_nonempty, CostParams, CurveSeries, EvalRecord, TrustError};

/// Rejection rates `0, 0.05, …, 0.95`.
pub fn rejection_grid() -> Vec<f64> {
    (0..20).map(|i| i as f64 / 20.0).collect()
}

/// Threshold probabilities `0.01, 0.02, …, 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

/// Referral rates `0, 0.05, …, 1`.
pub fn default_referral_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Accuracy after dropping the `k` most uncertain records.
fn accuracy_after(records: &[EvalRecord], order: &[usize], k: usize) -> f64 {
    let kept = &order[k..];
    if kept.is_empty() {
        return 1.0;
    }
    kept.iter().filter(|&&i| records[i].correct()).count() as f64 / kept.len() as f64
}

/// Accuracy on the records left after rejecting the `⌈r·n⌉` most
/// epistemically uncertain ones (ties rejected in index order). An empty
/// retained set counts as fully accurate.
pub fn retained_accuracy(records: &[EvalRecord], rate: f64) -> Result<f64, TrustError> {
    require_nonempty(records, "retained_accuracy")?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(TrustError::Grid);
    }
    let order = by_uncertainty(records);
    Ok(accuracy_after(records, &order, ceil_count(rate, records.len())))
}

/// Accuracy–rejection curve on the grid `0, 0.05, …, 0.95`.
pub fn rejection_curve(records: &[EvalRecord]) -> Result<CurveSeries, TrustError> {
    require_nonempty(records, "rejection_curve")?;
    let order = by_uncertainty(records);
    let n = records.len();
    let y = (0..20).map(|i| accuracy_after(records, &order, (i * n).div_ceil(20))).collect();
    Ok(CurveSeries::new(rejection_grid(), y))
}

fn check_grid(grid: &[f64], open: bool) -> Result<(), TrustError> {
    for &t in grid {
        let ok = if open { t > 0.0 && t < 1.0 } else { (0.0..=1.0).contains(&t) };
        if !ok {
            return Err(if open { TrustError::Threshold(t) } else { TrustError::Grid });
        }
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(TrustError::Grid);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionCurves {
    pub model: CurveSeries,
    pub treat_all: CurveSeries,
    pub treat_none: CurveSeries,
}

/// Net benefit `TP/n − (FP/n)·t/(1−t)` of treating when `prob_oa ≥ t`,
/// alongside the treat-all and treat-none policies.
pub fn net_benefit(records: &[EvalRecord], thresholds: &[f64]) -> Result<DecisionCurves, TrustError> {
    require_nonempty(records, "net_benefit")?;
    check_grid(thresholds, true)?;
    let n = records.len() as f64;
    let prevalence = records.iter().filter(|r| r.positive()).count() as f64 / n;
    let mut model = Vec::with_capacity(thresholds.len());
    let mut all = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let odds = t / (1.0 - t);
        let (mut tp, mut fp) = (0usize, 0usize);
        for r in records.iter().filter(|r| r.prob_oa >= t) {
            if r.positive() {
                tp += 1
            } else {
                fp += 1
            }
        }
        model.push(tp as f64 / n - fp as f64 / n * odds);
        all.push(prevalence - (1.0 - prevalence) * odds);
    }
    let x = thresholds.to_vec();
    Ok(DecisionCurves {
        model: CurveSeries::new(x.clone(), model),
        treat_all: CurveSeries::new(x.clone(), all),
        treat_none: CurveSeries::new(x, vec![0.0; thresholds.len()]),
    })
}

/// Expected cost per patient when the `⌈r·n⌉` most uncertain cases are
/// referred to a clinician and the rest are decided by the model on the
/// binary endpoint.
pub fn cost_profile(records: &[EvalRecord], costs: &CostParams, grid: &[f64]) -> Result<CurveSeries, TrustError> {
    require_nonempty(records, "cost_profile")?;
    costs.validate()?;
    check_grid(grid, false)?;
    let order = by_uncertainty(records);
    let n = records.len();
    let penalty = |r: &EvalRecord| match (r.positive(), r.predicted_positive()) {
        (true, false) => costs.false_negative,
        (false, true) => costs.false_positive,
        _ => 0.0,
    };
    let miss = |r: &EvalRecord| if r.positive() { costs.false_negative } else { costs.false_positive };
    let y = grid
        .iter()
        .map(|&rate| {
            let k = ceil_count(rate, n);
            let referred: f64 = order[..k].iter().map(|&i| costs.review + costs.clinician_error_rate * miss(&records[i])).sum();
            let automated: f64 = order[k..].iter().map(|&i| costs.ai + penalty(&records[i])).sum();
            (referred + automated) / n as f64
        })
        .collect();
    Ok(CurveSeries::new(grid.to_vec(), y))
}
