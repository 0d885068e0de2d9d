//! Epistemic uncertainty under corruption.

use serde::{Deserialize, Serialize};

use super::stats::mann_whitney_greater;
use super::{median, TrustError};
use crate::model::{corrupt, Checkpoint, Corruption, Image};
use crate::par::Exec;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    /// Corruption kind, or `none` for the clean-vs-clean null row.
    pub kind: String,
    pub severity: f64,
    pub n: usize,
    pub mean_epistemic: f64,
    pub median_epistemic: f64,
    pub clean_mean_epistemic: f64,
    pub u: f64,
    /// One-sided Mann–Whitney p for corrupted > clean.
    pub p_value: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn row(kind: String, severity: f64, clean: &[f64], shifted: &[f64]) -> Result<OodRow, TrustError> {
    let t = mann_whitney_greater(shifted, clean)?;
    Ok(OodRow {
        kind,
        severity,
        n: shifted.len(),
        mean_epistemic: mean(shifted),
        median_epistemic: median(shifted),
        clean_mean_epistemic: mean(clean),
        u: t.u,
        p_value: t.p_value,
    })
}

/// One row per corruption cell, preceded by the clean-vs-clean null row.
pub fn ood_rows(clean: &[f64], cells: &[(Corruption, Vec<f64>)]) -> Result<Vec<OodRow>, TrustError> {
    let mut rows = vec![row("none".into(), 0.0, clean, clean)?];
    for (c, eps) in cells {
        rows.push(row(c.kind.name().into(), c.severity, clean, eps)?);
    }
    Ok(rows)
}

/// Corrupt every clean image per grid cell (noise seeded per image) and
/// compare epistemic uncertainty against the clean set.
pub fn ood_report(
    checkpoint: &Checkpoint,
    clean: &[&Image],
    cells: &[Corruption],
    seed: u64,
    exec: Exec,
) -> Result<Vec<OodRow>, TrustError> {
    let epistemic = |imgs: &[&Image]| -> Result<Vec<f64>, TrustError> {
        Ok(checkpoint.predict(imgs, exec)?.iter().map(|p| p.epistemic).collect())
    };
    let base = epistemic(clean)?;
    let mut scored = Vec::with_capacity(cells.len());
    for c in cells {
        let purpose = format!("ood/{}", c.label());
        let shifted = exec.map_range(clean.len(), |i| corrupt(clean[i], c.kind, c.severity, seed::derive_indexed(seed, &purpose, i as u64)));
        let shifted = shifted.into_iter().collect::<Result<Vec<Image>, _>>()?;
        let refs: Vec<&Image> = shifted.iter().collect();
        scored.push((*c, epistemic(&refs)?));
    }
    ood_rows(&base, &scored)
}
