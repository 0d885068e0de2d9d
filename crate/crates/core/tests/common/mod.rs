//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls into the library's numerical code; special
//! functions come from `libm`.

#![allow(dead_code)]

use std::f64::consts::PI;

use evidentia::trust::{EvalRecord, OA_GRADE};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn lgamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Composite Simpson weights for `n` (even) intervals.
fn simpson_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

/// `ln ∫_a^b exp(log_f(t)) dt` by composite Simpson, shifted by the maximum
/// so that tiny or huge integrands stay representable.
pub fn log_integrate(a: f64, b: f64, n: usize, log_f: impl Fn(f64) -> f64) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let logs: Vec<f64> = (0..=n).map(|i| log_f(a + h * i as f64)).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logs.iter().enumerate().map(|(i, l)| simpson_weight(i, n) * (l - m).exp()).sum();
    m + (s * h / 3.0).ln()
}

pub fn integrate(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    (0..=n).map(|i| simpson_weight(i, n) * f(a + h * i as f64)).sum::<f64>() * h / 3.0
}

pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - (x - mean).powi(2) / (2.0 * var)
}

pub fn invgamma_logpdf(x: f64, alpha: f64, beta: f64) -> f64 {
    alpha * beta.ln() - lgamma(alpha) - (alpha + 1.0) * x.ln() - beta / x
}

/// Joint NIG log density of `(μ, σ²)`.
pub fn nig_logpdf(mu: f64, s2: f64, gamma: f64, nu: f64, alpha: f64, beta: f64) -> f64 {
    normal_logpdf(mu, gamma, s2 / nu) + invgamma_logpdf(s2, alpha, beta)
}

/// `ln p(y)` with `y | μ,σ² ~ N(μ, σ²)` and `(μ, σ²) ~ NIG(γ,ν,α,β)`, by
/// two-dimensional quadrature: μ on ±12 posterior standard deviations, σ²
/// on a log grid.
pub fn log_marginal_quadrature(gamma: f64, nu: f64, alpha: f64, beta: f64, y: f64) -> f64 {
    let inner_n = 200;
    log_integrate(-25.0, 25.0, 2000, |t| {
        let s2 = t.exp();
        let centre = (nu * gamma + y) / (nu + 1.0);
        let half = 12.0 * (s2 / (nu + 1.0)).sqrt();
        let inner = log_integrate(centre - half, centre + half, inner_n, |mu| {
            normal_logpdf(y, mu, s2) + normal_logpdf(mu, gamma, s2 / nu)
        });
        inner + invgamma_logpdf(s2, alpha, beta) + t
    })
}

/// KL(InvGamma(α,β) ‖ InvGamma(α₀,β₀)) by quadrature over `ln x`.
pub fn kl_invgamma_quadrature(alpha: f64, beta: f64, alpha0: f64, beta0: f64) -> f64 {
    let centre = (beta / alpha).ln();
    integrate(centre - 30.0, centre + 30.0, 40_000, |t| {
        let x = t.exp();
        let lp = invgamma_logpdf(x, alpha, beta);
        let lq = invgamma_logpdf(x, alpha0, beta0);
        let p = lp.exp();
        if p == 0.0 {
            0.0
        } else {
            p * (lp - lq) * x
        }
    })
}

/// Student-t log density with location, scale and degrees of freedom.
pub fn student_t_logpdf(y: f64, loc: f64, scale: f64, dof: f64) -> f64 {
    let z = (y - loc) / scale;
    lgamma(0.5 * (dof + 1.0)) - lgamma(0.5 * dof) - 0.5 * (dof * PI).ln() - scale.ln() - 0.5 * (dof + 1.0) * (1.0 + z * z / dof).ln()
}

/// `P(Y ≥ t)` for the NIG predictive, integrating the density over
/// `y = t + tan θ`, θ ∈ [0, π/2).
pub fn predictive_tail_quadrature(gamma: f64, nu: f64, alpha: f64, beta: f64, t: f64) -> f64 {
    let scale = (beta * (1.0 + nu) / (nu * alpha)).sqrt();
    let dof = 2.0 * alpha;
    let top = 0.5 * PI;
    integrate(0.0, top, 200_000, |th| {
        if th >= top {
            return 0.0;
        }
        let c = th.cos();
        (student_t_logpdf(t + th.tan(), gamma, scale, dof)).exp() / (c * c)
    })
}

/// Monte-Carlo mean and standard error of `f(μ, σ²)` under a NIG.
pub fn nig_monte_carlo(
    rng: &mut impl Rng,
    samples: usize,
    (gamma, nu, alpha, beta): (f64, f64, f64, f64),
    f: impl Fn(f64, f64) -> f64,
) -> (f64, f64) {
    let shape = Gamma::new(alpha, 1.0).unwrap();
    let std = Normal::new(0.0, 1.0).unwrap();
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let s2 = beta / shape.sample(rng);
        let mu = gamma + (s2 / nu).sqrt() * std.sample(rng);
        let v = f(mu, s2);
        sum += v;
        sum2 += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Central finite difference of `f` in coordinate `i`.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let up = f(&xp);
    xp[i] = x[i] - h;
    let down = f(&xp);
    (up - down) / (2.0 * h)
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding compare in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Random record set with deliberately tied scores and uncertainties.
pub fn random_records(rng: &mut impl Rng, n: usize) -> Vec<EvalRecord> {
    (0..n)
        .map(|_| {
            let y = rng.random_range(0..5);
            let p = if rng.random::<f64>() < 0.5 { y } else { rng.random_range(0..5) };
            let gamma = p as f64 + rng.random_range(-0.49..0.49);
            let score = if rng.random::<f64>() < 0.3 { (rng.random_range(0..=20) as f64) / 20.0 } else { rng.random::<f64>() };
            let eps = if rng.random::<f64>() < 0.3 { 0.5 } else { rng.random_range(0.01..1.0) };
            EvalRecord::new(y, gamma, p, eps, rng.random_range(0.01..1.0), score).unwrap()
        })
        .collect()
}

/// Random record set guaranteed to contain both binary classes.
pub fn random_records_two_class(rng: &mut impl Rng, n: usize) -> Vec<EvalRecord> {
    loop {
        let r = random_records(rng, n);
        let pos = r.iter().filter(|x| x.y_true >= OA_GRADE).count();
        if pos > 0 && pos < n {
            return r;
        }
    }
}

/// Quadratic weighted kappa from its pairwise form:
/// `1 − n Σ_i (y_i − p_i)² / Σ_i Σ_j (y_i − p_j)²`.
pub fn qwk_brute(y: &[usize], p: &[usize]) -> f64 {
    let n = y.len() as f64;
    let obs: f64 = y.iter().zip(p).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    let mut exp = 0.0;
    for &a in y {
        for &b in p {
            exp += (a as f64 - b as f64).powi(2);
        }
    }
    if exp == 0.0 {
        1.0
    } else {
        1.0 - n * obs / exp
    }
}

fn binary(records: &[EvalRecord]) -> (Vec<f64>, Vec<f64>) {
    let pos = records.iter().filter(|r| r.y_true >= OA_GRADE).map(|r| r.prob_oa).collect();
    let neg = records.iter().filter(|r| r.y_true < OA_GRADE).map(|r| r.prob_oa).collect();
    (pos, neg)
}

/// AUC by counting concordant pairs, ties counting one half.
pub fn auc_pairs(records: &[EvalRecord]) -> f64 {
    let (pos, neg) = binary(records);
    let mut s = 0.0;
    for &a in &pos {
        for &b in &neg {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Step-wise average precision: for every distinct score (descending),
/// recall increment times precision at that cut.
pub fn ap_brute(records: &[EvalRecord]) -> f64 {
    let (pos, _) = binary(records);
    let total_pos = pos.len() as f64;
    let mut cuts: Vec<f64> = records.iter().map(|r| r.prob_oa).collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in cuts {
        let sel: Vec<&EvalRecord> = records.iter().filter(|r| r.prob_oa >= t).collect();
        let tp = sel.iter().filter(|r| r.y_true >= OA_GRADE).count() as f64;
        let recall = tp / total_pos;
        ap += (recall - prev) * tp / sel.len() as f64;
        prev = recall;
    }
    ap
}

/// Expected calibration error on equal-width bins of `prob_oa`.
pub fn ece_brute(records: &[EvalRecord], bins: usize) -> f64 {
    let n = records.len() as f64;
    let mut ece = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<&EvalRecord> =
            records.iter().filter(|r| r.prob_oa >= lo && (r.prob_oa < hi || (b == bins - 1 && r.prob_oa <= 1.0))).collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let conf = members.iter().map(|r| r.prob_oa).sum::<f64>() / m;
        let freq = members.iter().filter(|r| r.y_true >= OA_GRADE).count() as f64 / m;
        ece += m / n * (conf - freq).abs();
    }
    ece
}

pub fn confusion_brute(records: &[EvalRecord]) -> [[u64; 5]; 5] {
    let mut c = [[0u64; 5]; 5];
    for i in 0..5 {
        for j in 0..5 {
            c[i][j] = records.iter().filter(|r| r.y_true == i && r.grade_pred == j).count() as u64;
        }
    }
    c
}

pub fn error_hist_brute(records: &[EvalRecord]) -> [u64; 9] {
    let mut h = [0u64; 9];
    for (slot, d) in h.iter_mut().zip(-4i64..=4) {
        *slot = records.iter().filter(|r| r.grade_pred as i64 - r.y_true as i64 == d).count() as u64;
    }
    h
}

/// Upper tail of the χ² distribution with `k` degrees of freedom by
/// quadrature of its density.
pub fn chi2_sf(x: f64, k: f64) -> f64 {
    let log_norm = -(0.5 * k) * 2f64.ln() - lgamma(0.5 * k);
    let cdf = integrate(0.0, x, 20_000, |t| if t == 0.0 { 0.0 } else { (log_norm + (0.5 * k - 1.0) * t.ln() - 0.5 * t).exp() });
    1.0 - cdf
}

/// Outcome of a finite-difference check over the network parameters.
#[derive(Debug, Clone)]
pub struct GradcheckSummary {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Full-model gradient check on a 2-sample batch: backward-mode gradients
/// of the training objective (NLL, regularizer, alignment, training-mode
/// dropout mask) against central differences at `per_tensor` random
/// coordinates of every parameter tensor (all of them when smaller).
pub fn model_gradcheck(mode: evidentia::nig::RegularizerMode, per_tensor: usize, seed_v: u64) -> GradcheckSummary {
    use evidentia::bae::dropout_mask;
    use evidentia::memory::{PrototypeBank, NUM_GRADES};
    use evidentia::model::{batch_loss, Image, ModelConfig, Network, Split, SyntheticSpec};
    use evidentia::par::Exec;
    use evidentia::seed;

    let spec = SyntheticSpec { n_train: 2, n_val: 0, n_test: 0, seed: seed_v, ..Default::default() };
    let samples = spec.generate_split(Split::Train, Exec::Sequential).unwrap();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let grades = [1usize, 3];
    let cfg = ModelConfig { lambda_kl: 0.1, ..Default::default() };
    let mut rng = seed::rng(seed_v);
    let net = Network::new(cfg.clone(), &mut rng).unwrap();
    let dim = cfg.embed_dim();
    let mut bank = PrototypeBank::new(dim, cfg.bank_momentum).unwrap();
    for g in 0..NUM_GRADES {
        let h: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        bank.update(&h, g).unwrap();
    }
    let mask = dropout_mask(&[2, dim], cfg.dropout, &mut rng);

    let objective = |n: &Network| {
        let bl = batch_loss(n, &images, &grades, &bank, mode, Some(mask.clone())).unwrap();
        bl.tape.value(bl.loss).item()
    };
    let bl = batch_loss(&net, &images, &grades, &bank, mode, Some(mask.clone())).unwrap();
    let mut g = bl.tape.backward(bl.loss).unwrap();
    let analytic: Vec<Vec<f64>> = bl
        .params
        .iter()
        .zip(net.params.arrays())
        .map(|(&v, a)| g.take(v).map(|x| x.into_data()).unwrap_or_else(|| vec![0.0; a.len()]))
        .collect();

    let names = net.params.names();
    let mut summary = GradcheckSummary { checked: 0, worst: 0.0, worst_at: String::new() };
    let h = 1e-5;
    for (t, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > per_tensor {
            coords = rand::seq::index::sample(&mut rng, len, per_tensor).into_vec();
        }
        for j in coords {
            let mut probe = net.clone();
            let base = probe.params.arrays()[t].data()[j];
            probe.params.arrays_mut()[t].data_mut()[j] = base + h;
            let up = objective(&probe);
            probe.params.arrays_mut()[t].data_mut()[j] = base - h;
            let down = objective(&probe);
            let fd = (up - down) / (2.0 * h);
            let e = rel_err(grad[j], fd);
            summary.checked += 1;
            if e > summary.worst {
                summary.worst = e;
                summary.worst_at = format!("{}[{j}] analytic {:e} numeric {:e}", names[t], grad[j], fd);
            }
        }
    }
    summary
}
