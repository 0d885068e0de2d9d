//! CSV and JSON report bundle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bootstrap::{pr_band, roc_band, BandedCurve};
use super::curves::{reliability, Reliability};
use super::decision::{cost_profile, default_referral_grid, default_thresholds, net_benefit, rejection_curve, DecisionCurves};
use super::metrics::{confusion_matrix, error_distribution, ordinal_metrics, qwk, Confusion, OrdinalMetrics};
use super::ood::OodRow;
use super::stats::{uncertainty_separation, Separation};
use super::{CostParams, CurveSeries, EvalRecord, TrustError};
use crate::memory::NUM_GRADES;
use crate::par::Exec;

/// Format with 9 significant digits, `%g` style: fixed notation for
/// exponents in `-5..9`, scientific otherwise, trailing zeros trimmed.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim(format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

/// Write a CSV file from a header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), TrustError> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub bootstrap: usize,
    pub seed: u64,
    pub costs: CostParams,
    pub bins: usize,
    pub thresholds: Vec<f64>,
    pub referral_grid: Vec<f64>,
    pub exec: Exec,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            bootstrap: 1000,
            seed: 7,
            costs: CostParams::default(),
            bins: 10,
            thresholds: default_thresholds(),
            referral_grid: default_referral_grid(),
            exec: Exec::default(),
        }
    }
}

/// Headline numbers written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub prevalence: f64,
    pub accuracy: f64,
    pub qwk: f64,
    pub macro_f1: f64,
    pub macro_recall: f64,
    pub mse: f64,
    pub f1_per_class: Vec<Option<f64>>,
    pub auroc: Option<[f64; 3]>,
    pub average_precision: Option<[f64; 3]>,
    pub ece: f64,
    pub brier: f64,
    pub separation: Option<Separation>,
    pub bootstrap_replicates: usize,
    pub seed: u64,
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Summary,
    pub metrics: OrdinalMetrics,
    pub confusion: Confusion,
    /// `None` when only one class is present in the records.
    pub roc: Option<BandedCurve>,
    pub pr: Option<BandedCurve>,
    pub reliability: Reliability,
    pub rejection: CurveSeries,
    pub dca: DecisionCurves,
    pub cost: CurveSeries,
    pub error_hist: [u64; 2 * NUM_GRADES - 1],
    pub ood: Option<Vec<OodRow>>,
}

fn optional<T>(r: Result<T, TrustError>) -> Result<Option<T>, TrustError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(TrustError::SingleClass(_) | TrustError::NoPositives(_) | TrustError::EmptyGroup(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl Report {
    /// Run every record-level analysis.
    pub fn build(records: &[EvalRecord], opts: &ReportOptions) -> Result<Self, TrustError> {
        let metrics = ordinal_metrics(records)?;
        let confusion = confusion_matrix(records)?;
        let truth: Vec<usize> = records.iter().map(|r| r.y_true).collect();
        let pred: Vec<usize> = records.iter().map(|r| r.grade_pred).collect();
        let kappa = if records.len() >= 2 { qwk(&truth, &pred)? } else { f64::NAN };
        let roc = optional(roc_band(records, opts.bootstrap, opts.seed, opts.exec))?;
        let pr = optional(pr_band(records, opts.bootstrap, opts.seed, opts.exec))?;
        let rel = reliability(records, opts.bins)?;
        let separation = optional(uncertainty_separation(records))?;
        let triple = |b: &BandedCurve| [b.estimate, b.estimate_lower, b.estimate_upper];
        let summary = Summary {
            n: records.len(),
            prevalence: records.iter().filter(|r| r.positive()).count() as f64 / records.len() as f64,
            accuracy: metrics.accuracy,
            qwk: kappa,
            macro_f1: metrics.macro_f1,
            macro_recall: metrics.macro_recall,
            mse: metrics.mse,
            f1_per_class: metrics.f1.to_vec(),
            auroc: roc.as_ref().map(triple),
            average_precision: pr.as_ref().map(triple),
            ece: rel.ece,
            brier: rel.brier,
            separation,
            bootstrap_replicates: opts.bootstrap,
            seed: opts.seed,
            confusion: confusion.counts.iter().map(|r| r.to_vec()).collect(),
        };
        Ok(Self {
            summary,
            confusion,
            roc,
            pr,
            reliability: rel,
            rejection: rejection_curve(records)?,
            dca: net_benefit(records, &opts.thresholds)?,
            cost: cost_profile(records, &opts.costs, &opts.referral_grid)?,
            error_hist: error_distribution(records),
            metrics,
            ood: None,
        })
    }
}

fn f(v: f64) -> String {
    fmt_sig(v)
}

fn banded_rows(b: &Option<BandedCurve>) -> Vec<Vec<String>> {
    let Some(b) = b else { return Vec::new() };
    let (lo, hi) = (b.curve.lower.as_ref().expect("banded"), b.curve.upper.as_ref().expect("banded"));
    (0..b.curve.x.len()).map(|i| vec![f(b.curve.x[i]), f(b.curve.y[i]), f(lo[i]), f(hi[i])]).collect()
}

/// Write the full bundle into `dir` (which must exist).
pub fn write_report(dir: &Path, report: &Report) -> Result<(), TrustError> {
    let mut json = serde_json::to_string_pretty(&report.summary)?;
    json.push('\n');
    fs::write(dir.join("metrics.json"), json)?;

    let mut header = vec!["true_grade".to_string()];
    header.extend((0..NUM_GRADES).map(|j| format!("count_{j}")));
    header.extend((0..NUM_GRADES).map(|j| format!("rate_{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..NUM_GRADES)
        .map(|i| {
            let mut r = vec![i.to_string()];
            r.extend(report.confusion.counts[i].iter().map(|c| c.to_string()));
            r.extend(report.confusion.normalized[i].iter().map(|&v| f(v)));
            r
        })
        .collect();
    write_csv(&dir.join("confusion.csv"), &header, &rows)?;

    write_csv(&dir.join("roc.csv"), &["fpr", "tpr", "tpr_lower", "tpr_upper"], &banded_rows(&report.roc))?;
    write_csv(&dir.join("pr.csv"), &["recall", "precision", "precision_lower", "precision_upper"], &banded_rows(&report.pr))?;

    let rows: Vec<Vec<String>> = report
        .reliability
        .bins
        .iter()
        .map(|b| vec![f(b.lower), f(b.upper), b.count.to_string(), f(b.confidence), f(b.frequency)])
        .collect();
    write_csv(&dir.join("reliability.csv"), &["bin_lower", "bin_upper", "count", "confidence", "frequency"], &rows)?;

    let xy = |c: &CurveSeries| -> Vec<Vec<String>> { c.x.iter().zip(&c.y).map(|(x, y)| vec![f(*x), f(*y)]).collect() };
    write_csv(&dir.join("rejection.csv"), &["rejection_rate", "accuracy"], &xy(&report.rejection))?;
    write_csv(&dir.join("cost_profile.csv"), &["referral_rate", "cost"], &xy(&report.cost))?;

    let d = &report.dca;
    let rows: Vec<Vec<String>> = (0..d.model.x.len())
        .map(|i| vec![f(d.model.x[i]), f(d.model.y[i]), f(d.treat_all.y[i]), f(d.treat_none.y[i])])
        .collect();
    write_csv(&dir.join("dca.csv"), &["threshold", "model", "treat_all", "treat_none"], &rows)?;

    let rows: Vec<Vec<String>> = report
        .error_hist
        .iter()
        .enumerate()
        .map(|(i, c)| vec![(i as i64 - (NUM_GRADES as i64 - 1)).to_string(), c.to_string()])
        .collect();
    write_csv(&dir.join("error_hist.csv"), &["offset", "count"], &rows)?;

    if let Some(ood) = &report.ood {
        write_ood_csv(&dir.join("ood.csv"), ood)?;
    }
    Ok(())
}

pub fn write_ood_csv(path: &Path, rows: &[OodRow]) -> Result<(), TrustError> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.kind.clone(),
                f(r.severity),
                r.n.to_string(),
                f(r.mean_epistemic),
                f(r.median_epistemic),
                f(r.clean_mean_epistemic),
                f(r.u),
                f(r.p_value),
            ]
        })
        .collect();
    write_csv(
        path,
        &["kind", "severity", "n", "mean_epistemic", "median_epistemic", "clean_mean_epistemic", "u", "p_value"],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.1), "0.1");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(-2.0 / 3.0), "-0.666666667");
        assert_eq!(fmt_sig(123456.7891234), "123456.789");
        assert_eq!(fmt_sig(1e-7), "1e-07");
        assert_eq!(fmt_sig(1.5e12), "1.5e+12");
        assert_eq!(fmt_sig(0.000123), "0.000123");
        assert_eq!(fmt_sig(999_999_999.6), "1e+09");
    }

    #[test]
    fn perfect_records_report() {
        let recs: Vec<_> =
            (0..25).map(|i| EvalRecord::new(i % 5, (i % 5) as f64, i % 5, 0.1, 0.1, if i % 5 >= 2 { 1.0 } else { 0.0 }).unwrap()).collect();
        let opts = ReportOptions { bootstrap: 100, ..Default::default() };
        let r = Report::build(&recs, &opts).unwrap();
        assert_eq!(r.summary.accuracy, 1.0);
        assert_eq!(r.summary.qwk, 1.0);
        assert!(r.summary.separation.is_none());
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &r).unwrap();
        for name in ["metrics.json", "confusion.csv", "roc.csv", "pr.csv", "reliability.csv", "rejection.csv", "dca.csv", "cost_profile.csv", "error_hist.csv"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
    }
}
