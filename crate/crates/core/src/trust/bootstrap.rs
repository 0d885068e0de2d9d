//! Percentile bootstrap bands.
//!
//! Replicate `i` draws from its own generator seeded by `(seed, i)`, so
//! results are identical under any worker count.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::curves::{pr_curve, roc};
use super::{quantile_sorted, CurveSeries, EvalRecord, TrustError};
use crate::par::Exec;
use crate::seed;

/// Points of the fixed interpolation grid `0, 0.01, …, 1`.
pub const GRID_POINTS: usize = 101;

pub fn unit_grid() -> Vec<f64> {
    (0..GRID_POINTS).map(|i| i as f64 / (GRID_POINTS - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub replicates: usize,
    /// Resamples drawn, including degenerate ones that were redrawn.
    pub attempts: usize,
}

fn degenerate(e: &TrustError) -> bool {
    matches!(e, TrustError::SingleClass(_) | TrustError::NoPositives(_) | TrustError::EmptyGroup(_) | TrustError::Empty(_))
}

/// Percentile band of a vector-valued statistic over `replicates`
/// resamples with replacement. Resamples on which the statistic is
/// undefined (a single class present) are redrawn; at most
/// `10·replicates` resamples are drawn in total.
pub fn bootstrap_band<F>(
    records: &[EvalRecord],
    replicates: usize,
    level: f64,
    seed: u64,
    exec: Exec,
    statistic: F,
) -> Result<BootstrapBand, TrustError>
where
    F: Fn(&[EvalRecord]) -> Result<Vec<f64>, TrustError> + Sync + Send,
{
    if replicates < 100 {
        return Err(TrustError::TooFew { op: "bootstrap", min: 100, got: replicates });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(TrustError::Param(format!("confidence level {level} outside (0, 1)")));
    }
    if records.is_empty() {
        return Err(TrustError::Empty("bootstrap"));
    }
    let cap = 10 * replicates;
    let n = records.len();
    let results = exec.map_range(replicates, |i| -> Result<(Option<Vec<f64>>, usize), TrustError> {
        let mut rng = seed::rng(seed::derive_indexed(seed, "bootstrap", i as u64));
        let mut sample = Vec::with_capacity(n);
        for attempt in 1..=cap {
            sample.clear();
            sample.extend((0..n).map(|_| records[rng.random_range(0..n)]));
            match statistic(&sample) {
                Ok(v) => return Ok((Some(v), attempt)),
                Err(e) if degenerate(&e) => continue,
                Err(e) => return Err(e),
            }
        }
        Ok((None, cap))
    });
    let mut values = Vec::with_capacity(replicates);
    let mut attempts = 0;
    for r in results {
        let (v, a) = r?;
        attempts += a;
        match v {
            Some(v) => values.push(v),
            None => return Err(TrustError::Degenerate(attempts)),
        }
    }
    if attempts > cap {
        return Err(TrustError::Degenerate(attempts));
    }
    let dim = values[0].len();
    if values.iter().any(|v| v.len() != dim) {
        return Err(TrustError::Param("statistic returned vectors of differing length".into()));
    }
    let alpha = (1.0 - level) / 2.0;
    let mut lower = Vec::with_capacity(dim);
    let mut upper = Vec::with_capacity(dim);
    let mut column = vec![0.0; replicates];
    for j in 0..dim {
        for (c, v) in column.iter_mut().zip(&values) {
            *c = v[j];
        }
        column.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&column, alpha));
        upper.push(quantile_sorted(&column, 1.0 - alpha));
    }
    Ok(BootstrapBand { lower, upper, replicates, attempts })
}

/// A curve on the unit grid with its bootstrap band, plus the scalar
/// summary (AUC or AP) and its interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandedCurve {
    pub curve: CurveSeries,
    pub estimate: f64,
    pub estimate_lower: f64,
    pub estimate_upper: f64,
    pub attempts: usize,
}

fn banded<F>(records: &[EvalRecord], replicates: usize, seed: u64, exec: Exec, stat: F) -> Result<BandedCurve, TrustError>
where
    F: Fn(&[EvalRecord]) -> Result<Vec<f64>, TrustError> + Sync + Send,
{
    let point = stat(records)?;
    let band = bootstrap_band(records, replicates, 0.95, seed, exec, &stat)?;
    let k = GRID_POINTS;
    // widen where a percentile misses the point estimate so the band
    // always brackets the curve
    let lower: Vec<f64> = band.lower.iter().zip(&point).map(|(l, y)| l.min(*y)).collect();
    let upper: Vec<f64> = band.upper.iter().zip(&point).map(|(u, y)| u.max(*y)).collect();
    let mut curve = CurveSeries::new(unit_grid(), point[..k].to_vec());
    curve.lower = Some(lower[..k].to_vec());
    curve.upper = Some(upper[..k].to_vec());
    Ok(BandedCurve { curve, estimate: point[k], estimate_lower: lower[k], estimate_upper: upper[k], attempts: band.attempts })
}

/// ROC (TPR over the FPR grid) with a bootstrap band; the scalar is AUC.
pub fn roc_band(records: &[EvalRecord], replicates: usize, seed: u64, exec: Exec) -> Result<BandedCurve, TrustError> {
    let grid = unit_grid();
    banded(records, replicates, seed::derive(seed, "roc"), exec, |r| {
        let c = roc(r)?;
        let mut v: Vec<f64> = grid.iter().map(|&x| c.tpr_at(x)).collect();
        v.push(c.auc);
        Ok(v)
    })
}

/// Interpolated precision over the recall grid; the scalar is AP.
pub fn pr_band(records: &[EvalRecord], replicates: usize, seed: u64, exec: Exec) -> Result<BandedCurve, TrustError> {
    let grid = unit_grid();
    banded(records, replicates, seed::derive(seed, "pr"), exec, |r| {
        let c = pr_curve(r)?;
        let mut v: Vec<f64> = grid.iter().map(|&x| c.precision_at(x)).collect();
        v.push(c.ap);
        Ok(v)
    })
}
