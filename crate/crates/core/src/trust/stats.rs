//! One-sided Mann–Whitney U test.

use serde::{Deserialize, Serialize};

use super::{median, require_nonempty, EvalRecord, TrustError};

/// Pooled sample size up to which the null distribution is enumerated.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `Σ 1[x > y] + ½·1[x = y]` over all pairs.
    pub u: f64,
    /// One-sided p-value for `x` stochastically greater than `y`.
    pub p_value: f64,
    pub exact: bool,
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Midranks (1-based) of the pooled sample, doubled so they are integers.
fn doubled_midranks(pooled: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i+j+2)/2
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Test whether `x` tends to exceed `y`. Pooled samples of at most
/// [`EXACT_MAX_N`] use the exact permutation distribution of the rank sum
/// (midranks under ties); larger samples use the normal approximation with
/// tie and continuity corrections.
pub fn mann_whitney_greater(x: &[f64], y: &[f64]) -> Result<MannWhitney, TrustError> {
    if x.is_empty() || y.is_empty() {
        return Err(TrustError::EmptyGroup("mann_whitney"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(TrustError::Param("NaN in Mann–Whitney sample".into()));
    }
    let (n1, n2) = (x.len(), y.len());
    let mut u = 0.0;
    for &a in x {
        for &b in y {
            u += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let n = n1 + n2;
    let (ranks, ties) = doubled_midranks(&pooled);
    if n <= EXACT_MAX_N {
        let observed: u64 = ranks[..n1].iter().sum();
        let max_sum: u64 = ranks.iter().sum();
        // ways[k][s]: subsets of size k with doubled rank sum s
        let mut ways = vec![vec![0f64; max_sum as usize + 1]; n1 + 1];
        ways[0][0] = 1.0;
        for &r in &ranks {
            for k in (1..=n1).rev() {
                for s in (r as usize..=max_sum as usize).rev() {
                    ways[k][s] += ways[k - 1][s - r as usize];
                }
            }
        }
        let total: f64 = ways[n1].iter().sum();
        let tail: f64 = ways[n1][observed as usize..].iter().sum();
        return Ok(MannWhitney { u, p_value: tail / total, exact: true });
    }
    let (n1f, n2f, nf) = (n1 as f64, n2 as f64, n as f64);
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (nf * (nf - 1.0));
    let var = n1f * n2f / 12.0 * ((nf + 1.0) - tie_term);
    let p_value = if var <= 0.0 {
        1.0
    } else {
        normal_sf((u - n1f * n2f / 2.0 - 0.5) / var.sqrt())
    };
    Ok(MannWhitney { u, p_value, exact: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub test: MannWhitney,
    pub n_incorrect: usize,
    pub n_correct: usize,
    pub median_incorrect: f64,
    pub median_correct: f64,
}

/// Are misclassified cases more epistemically uncertain than correct ones?
pub fn uncertainty_separation(records: &[EvalRecord]) -> Result<Separation, TrustError> {
    require_nonempty(records, "uncertainty_separation")?;
    let (wrong, right): (Vec<&EvalRecord>, Vec<&EvalRecord>) = records.iter().partition(|r| !r.correct());
    if wrong.is_empty() || right.is_empty() {
        return Err(TrustError::EmptyGroup("uncertainty_separation"));
    }
    let w: Vec<f64> = wrong.iter().map(|r| r.epistemic).collect();
    let c: Vec<f64> = right.iter().map(|r| r.epistemic).collect();
    Ok(Separation {
        test: mann_whitney_greater(&w, &c)?,
        n_incorrect: w.len(),
        n_correct: c.len(),
        median_incorrect: median(&w),
        median_correct: median(&c),
    })
}
