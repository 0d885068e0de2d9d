//! Ordinal agreement metrics.

use serde::{Deserialize, Serialize};

use super::{require_nonempty, EvalRecord, TrustError};
use crate::memory::NUM_GRADES;

const K: usize = NUM_GRADES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// `counts[true][pred]`.
    pub counts: [[u64; K]; K],
    /// Row-normalised counts; rows without support are all zero.
    pub normalized: [[f64; K]; K],
    /// True grades with no records.
    pub empty_rows: Vec<usize>,
}

pub fn confusion_matrix(records: &[EvalRecord]) -> Result<Confusion, TrustError> {
    require_nonempty(records, "confusion_matrix")?;
    let mut counts = [[0u64; K]; K];
    for r in records {
        r.validate()?;
        counts[r.y_true][r.grade_pred] += 1;
    }
    let mut normalized = [[0.0; K]; K];
    let mut empty_rows = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            empty_rows.push(i);
            continue;
        }
        for (j, &c) in row.iter().enumerate() {
            normalized[i][j] = c as f64 / total as f64;
        }
    }
    Ok(Confusion { counts, normalized, empty_rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalMetrics {
    pub accuracy: f64,
    /// Mean F1 over classes with support.
    pub macro_f1: f64,
    /// Mean recall over classes with support.
    pub macro_recall: f64,
    /// Mean squared error of the continuous γ against the true grade.
    pub mse: f64,
    /// Per-class F1; `None` for classes without support.
    pub f1: [Option<f64>; K],
    pub unsupported: Vec<usize>,
}

pub fn ordinal_metrics(records: &[EvalRecord]) -> Result<OrdinalMetrics, TrustError> {
    let cm = confusion_matrix(records)?;
    let n = records.len() as f64;
    let correct: u64 = (0..K).map(|k| cm.counts[k][k]).sum();
    let mut f1 = [None; K];
    let (mut f1_sum, mut rec_sum, mut supported) = (0.0, 0.0, 0usize);
    for k in 0..K {
        let support: u64 = cm.counts[k].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = cm.counts[k][k] as f64;
        let predicted: u64 = (0..K).map(|i| cm.counts[i][k]).sum();
        let fp = predicted as f64 - tp;
        let fneg = support as f64 - tp;
        let f = 2.0 * tp / (2.0 * tp + fp + fneg);
        f1[k] = Some(f);
        f1_sum += f;
        rec_sum += tp / support as f64;
        supported += 1;
    }
    let mse = records.iter().map(|r| (r.gamma - r.y_true as f64).powi(2)).sum::<f64>() / n;
    Ok(OrdinalMetrics {
        accuracy: correct as f64 / n,
        macro_f1: f1_sum / supported as f64,
        macro_recall: rec_sum / supported as f64,
        mse,
        f1,
        unsupported: cm.empty_rows,
    })
}

/// Quadratic weighted Cohen's kappa over grades `0..5`. Expected counts
/// are the outer product of the marginals scaled to `n`; when the expected
/// weighted disagreement is zero the kappa is defined as 1.
pub fn qwk(y_true: &[usize], y_pred: &[usize]) -> Result<f64, TrustError> {
    if y_true.len() != y_pred.len() {
        return Err(TrustError::LengthMismatch { op: "qwk", left: y_true.len(), right: y_pred.len() });
    }
    if y_true.len() < 2 {
        return Err(TrustError::TooFew { op: "qwk", min: 2, got: y_true.len() });
    }
    let mut observed = [[0.0f64; K]; K];
    let mut row = [0.0f64; K];
    let mut col = [0.0f64; K];
    for (&a, &b) in y_true.iter().zip(y_pred) {
        if a >= K || b >= K {
            return Err(TrustError::Label(a.max(b)));
        }
        observed[a][b] += 1.0;
        row[a] += 1.0;
        col[b] += 1.0;
    }
    let n = y_true.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..K {
        for j in 0..K {
            let w = ((i as f64 - j as f64) / (K - 1) as f64).powi(2);
            num += w * observed[i][j];
            den += w * row[i] * col[j] / n;
        }
    }
    Ok(if den == 0.0 { 1.0 } else { 1.0 - num / den })
}

/// Counts of `pred − true` for offsets `−4..=4` (index `offset + 4`).
pub fn error_distribution(records: &[EvalRecord]) -> [u64; 2 * K - 1] {
    let mut hist = [0u64; 2 * K - 1];
    for r in records {
        hist[(r.grade_pred as isize - r.y_true as isize + (K as isize - 1)) as usize] += 1;
    }
    hist
}
