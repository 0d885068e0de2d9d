//! Special functions used by the evidential losses and the Student-t
//! predictive distribution.

use std::f64::consts::PI;

use super::DiffError;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine coefficients).
pub fn log_gamma(x: f64) -> Result<f64, DiffError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(DiffError::Domain { op: "log_gamma", value: x });
    }
    Ok(log_gamma_unchecked(x))
}

pub(crate) fn log_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx); sin(πx) > 0 on (0, 0.5).
        return (PI / (PI * x).sin()).ln() - log_gamma_unchecked(1.0 - x);
    }
    let z = x - 1.0;
    let mut series = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        series += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + series.ln()
}

/// Digamma `ψ(x)` for `x > 0`: recurrence up to `x ≥ 6`, then the
/// asymptotic expansion.
pub fn digamma(x: f64) -> Result<f64, DiffError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(DiffError::Domain { op: "digamma", value: x });
    }
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number series in 1/x².
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - tail
}

/// Trigamma `ψ'(x)` for `x > 0`; the derivative of [`digamma`].
pub fn trigamma(x: f64) -> Result<f64, DiffError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(DiffError::Domain { op: "trigamma", value: x });
    }
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0)))));
    acc + tail
}

/// Regularized incomplete beta `I_x(a, b)` by the modified Lentz continued
/// fraction, using the symmetry `I_x(a,b) = 1 - I_{1-x}(b,a)` for fast
/// convergence.
pub fn inc_beta(a: f64, b: f64, x: f64) -> Result<f64, DiffError> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(DiffError::Domain { op: "inc_beta", value: a });
    }
    if !(b > 0.0) || !b.is_finite() {
        return Err(DiffError::Domain { op: "inc_beta", value: b });
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(DiffError::Domain { op: "inc_beta", value: x });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = log_gamma_unchecked(a + b) - log_gamma_unchecked(a) - log_gamma_unchecked(b)
        + a * x.ln()
        + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(ln_front.exp() * beta_cf(a, b, x) / a)
    } else {
        Ok(1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// CDF of a location-scale Student-t distribution with `dof` degrees of
/// freedom.
pub fn student_t_cdf(x: f64, location: f64, scale: f64, dof: f64) -> Result<f64, DiffError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(DiffError::Domain { op: "student_t_cdf", value: scale });
    }
    if !(dof > 0.0) || !dof.is_finite() {
        return Err(DiffError::Domain { op: "student_t_cdf", value: dof });
    }
    if x.is_nan() {
        return Err(DiffError::Domain { op: "student_t_cdf", value: x });
    }
    if x == f64::INFINITY {
        return Ok(1.0);
    }
    if x == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let t = (x - location) / scale;
    if t == 0.0 {
        return Ok(0.5);
    }
    let tail = 0.5 * inc_beta(0.5 * dof, 0.5, dof / (dof + t * t))?;
    Ok(if t > 0.0 { 1.0 - tail } else { tail })
}
