//! ROC, precision–recall and reliability curves for the binary
//! "grade ≥ 2" endpoint scored by `prob_oa`.

use serde::{Deserialize, Serialize};

use super::{require_nonempty, CurveSeries, EvalRecord, TrustError};

/// Scores sorted descending with their labels, grouped by equal score.
fn score_groups(records: &[EvalRecord]) -> Vec<(f64, u64, u64)> {
    let mut pairs: Vec<(f64, bool)> = records.iter().map(|r| (r.prob_oa, r.positive())).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for (s, pos) in pairs {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if pos {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, pos as u64, (!pos) as u64)),
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Starts at `(0, 0)`; one point per distinct score, descending.
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// Score threshold of each point (`+∞` for the origin).
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    /// TPR at a false-positive rate, following the piecewise-linear curve
    /// and taking the top of any vertical segment.
    pub fn tpr_at(&self, x: f64) -> f64 {
        let k = self.fpr.partition_point(|&f| f <= x);
        if k == 0 {
            return 0.0;
        }
        let i = k - 1;
        if self.fpr[i] == x || i + 1 == self.fpr.len() {
            return self.tpr[i];
        }
        let t = (x - self.fpr[i]) / (self.fpr[i + 1] - self.fpr[i]);
        self.tpr[i] + t * (self.tpr[i + 1] - self.tpr[i])
    }
}

/// ROC curve with trapezoidal AUC. Ties in score move diagonally, which
/// gives them half credit.
pub fn roc(records: &[EvalRecord]) -> Result<RocCurve, TrustError> {
    let pos = records.iter().filter(|r| r.positive()).count() as f64;
    let neg = records.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(TrustError::SingleClass("roc"));
    }
    let (mut fpr, mut tpr, mut thresholds) = (vec![0.0], vec![0.0], vec![f64::INFINITY]);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0;
    for (s, p, n) in score_groups(records) {
        tp += p;
        fp += n;
        let (x, y) = (fp as f64 / neg, tp as f64 / pos);
        auc += (x - fpr[fpr.len() - 1]) * (y + tpr[tpr.len() - 1]) / 2.0;
        fpr.push(x);
        tpr.push(y);
        thresholds.push(s);
    }
    Ok(RocCurve { fpr, tpr, thresholds, auc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// One point per distinct score, descending; recall is nondecreasing.
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Step-wise average precision `Σ (R_k − R_{k−1})·P_k`.
    pub ap: f64,
}

impl PrCurve {
    /// Interpolated precision: the best precision at recall ≥ `x`.
    pub fn precision_at(&self, x: f64) -> f64 {
        let k = self.recall.partition_point(|&r| r < x);
        self.precision[k.min(self.precision.len() - 1)..].iter().copied().fold(0.0, f64::max)
    }
}

pub fn pr_curve(records: &[EvalRecord]) -> Result<PrCurve, TrustError> {
    let pos = records.iter().filter(|r| r.positive()).count() as f64;
    if pos == 0.0 {
        return Err(TrustError::NoPositives("pr_curve"));
    }
    let (mut recall, mut precision, mut thresholds) = (Vec::new(), Vec::new(), Vec::new());
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for (s, p, n) in score_groups(records) {
        tp += p;
        fp += n;
        let r = tp as f64 / pos;
        let pr = tp as f64 / (tp + fp) as f64;
        ap += (r - prev_r) * pr;
        prev_r = r;
        recall.push(r);
        precision.push(pr);
        thresholds.push(s);
    }
    Ok(PrCurve { recall, precision, thresholds, ap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean `prob_oa` in the bin (NaN-free: empty bins report 0).
    pub confidence: f64,
    /// Observed fraction of positives in the bin.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    /// Mean confidence → observed frequency over nonempty bins.
    pub curve: CurveSeries,
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub brier: f64,
}

/// Equal-width reliability diagram on `prob_oa`, with ECE and Brier score.
pub fn reliability(records: &[EvalRecord], bins: usize) -> Result<Reliability, TrustError> {
    require_nonempty(records, "reliability")?;
    if bins == 0 {
        return Err(TrustError::Param("at least one bin is required".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    let mut brier = 0.0;
    for r in records {
        let b = ((r.prob_oa * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += r.prob_oa;
        let y = if r.positive() { 1.0 } else { 0.0 };
        hits[b] += y;
        brier += (r.prob_oa - y).powi(2);
    }
    let n = records.len() as f64;
    let mut out = Vec::with_capacity(bins);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut ece = 0.0;
    for b in 0..bins {
        let (c, f) = if count[b] > 0 { (conf[b] / count[b] as f64, hits[b] / count[b] as f64) } else { (0.0, 0.0) };
        if count[b] > 0 {
            ece += count[b] as f64 / n * (c - f).abs();
            xs.push(c);
            ys.push(f);
        }
        out.push(ReliabilityBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            confidence: c,
            frequency: f,
        });
    }
    Ok(Reliability { curve: CurveSeries::new(xs, ys), bins: out, ece, brier: brier / n })
}
