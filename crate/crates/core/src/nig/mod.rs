//! Normal–Inverse-Gamma evidential mathematics.
//!
//! A prediction is a set of NIG parameters `(γ, ν, α, β)` over the mean and
//! variance of a Gaussian likelihood for the severity score `y`:
//! `μ | σ² ~ N(γ, σ²/ν)`, `σ² ~ InvGamma(α, β)`. Integrating both out gives
//! a Student-t predictive with location `γ`, squared scale
//! `β(1+ν)/(να)` and `2α` degrees of freedom.
//!
//! The free functions here work on plain `f64`; [`graph`] records the same
//! formulas on a [`Tape`](crate::diffcore::Tape) for training.

pub mod graph;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffcore::special::{digamma_unchecked, log_gamma_unchecked};
use crate::diffcore::{softplus, student_t_cdf};

/// Shift added after the softplus positivity transforms.
pub const ACTIVATION_EPS: f64 = 1e-6;

/// Cut point on the continuous grade axis for "grade ≥ 2".
pub const OA_THRESHOLD: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NigError {
    #[error("invalid NIG parameters (γ={gamma}, ν={nu}, α={alpha}, β={beta})")]
    InvalidParams { gamma: f64, nu: f64, alpha: f64, beta: f64 },
    #[error("non-finite raw head output {0:?}")]
    NonFiniteRaw([f64; 4]),
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("regularizer weight must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
}

/// Evidential parameters of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub gamma: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(gamma: f64, nu: f64, alpha: f64, beta: f64) -> Result<Self, NigError> {
        let p = Self { gamma, nu, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), NigError> {
        let finite = self.gamma.is_finite() && self.nu.is_finite() && self.alpha.is_finite() && self.beta.is_finite();
        if finite && self.nu > 0.0 && self.alpha > 1.0 && self.beta > 0.0 {
            Ok(())
        } else {
            Err(NigError::InvalidParams { gamma: self.gamma, nu: self.nu, alpha: self.alpha, beta: self.beta })
        }
    }

    /// Total evidence `ν + 2α`.
    pub fn evidence(&self) -> f64 {
        self.nu + 2.0 * self.alpha
    }

    /// `(location, scale, dof)` of the Student-t predictive.
    pub fn student_t(&self) -> (f64, f64, f64) {
        let scale2 = self.beta * (1.0 + self.nu) / (self.nu * self.alpha);
        (self.gamma, scale2.sqrt(), 2.0 * self.alpha)
    }
}

/// Low-evidence reference distribution the KL regularizer pulls toward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigPrior {
    pub gamma0: f64,
    pub nu0: f64,
    pub alpha0: f64,
    pub beta0: f64,
}

impl Default for NigPrior {
    fn default() -> Self {
        Self { gamma0: 2.0, nu0: 0.1, alpha0: 1.001, beta0: 2.0 }
    }
}

impl NigPrior {
    pub fn as_params(&self) -> NigParams {
        NigParams { gamma: self.gamma0, nu: self.nu0, alpha: self.alpha0, beta: self.beta0 }
    }

    pub fn validate(&self) -> Result<(), NigError> {
        self.as_params().validate()
    }
}

impl From<NigParams> for NigPrior {
    fn from(p: NigParams) -> Self {
        Self { gamma0: p.gamma, nu0: p.nu, alpha0: p.alpha, beta0: p.beta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub aleatoric: f64,
    pub epistemic: f64,
    pub total: f64,
}

/// Which evidence regularizer accompanies the NLL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    /// KL divergence to the low-evidence prior.
    #[default]
    Kl,
    /// Error-scaled evidence penalty `|y-γ|·(2ν+α)`.
    Evidence,
}

/// Map four raw head outputs to valid NIG parameters.
pub fn activate(raw: [f64; 4]) -> Result<NigParams, NigError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(NigError::NonFiniteRaw(raw));
    }
    Ok(NigParams {
        gamma: raw[0],
        nu: softplus(raw[1]) + ACTIVATION_EPS,
        alpha: softplus(raw[2]) + 1.0 + ACTIVATION_EPS,
        beta: softplus(raw[3]) + ACTIVATION_EPS,
    })
}

/// Closed-form negative log marginal likelihood of `y`.
pub fn nll(p: &NigParams, y: f64) -> Result<f64, NigError> {
    p.validate()?;
    let omega = 2.0 * p.beta * (1.0 + p.nu);
    let r = y - p.gamma;
    Ok(0.5 * (PI / p.nu).ln() - p.alpha * omega.ln()
        + (p.alpha + 0.5) * (p.nu * r * r + omega).ln()
        + log_gamma_unchecked(p.alpha)
        - log_gamma_unchecked(p.alpha + 0.5))
}

/// Log-density of the Student-t predictive, written in its own
/// location/scale/dof parameterization.
pub fn predictive_logpdf(p: &NigParams, y: f64) -> Result<f64, NigError> {
    p.validate()?;
    let (loc, scale, dof) = p.student_t();
    let z = (y - loc) / scale;
    Ok(log_gamma_unchecked(0.5 * (dof + 1.0)) - log_gamma_unchecked(0.5 * dof)
        - 0.5 * (dof * PI).ln()
        - scale.ln()
        - 0.5 * (dof + 1.0) * (z * z / dof).ln_1p())
}

/// Expected conditional-Gaussian KL under `σ² ~ InvGamma(α, β)`, using
/// `E[1/σ²] = α/β`.
pub fn kl_gaussian_expected(p: &NigParams, q: &NigPrior) -> Result<f64, NigError> {
    p.validate()?;
    q.validate()?;
    let ratio = q.nu0 / p.nu;
    let d = p.gamma - q.gamma0;
    Ok(0.5 * (ratio - ratio.ln() - 1.0) + 0.5 * q.nu0 * d * d * p.alpha / p.beta)
}

/// `KL[InvGamma(α, β) ‖ InvGamma(α₀, β₀)]`, evaluated as the KL between the
/// corresponding Gamma(shape, rate) laws of the precision.
pub fn kl_invgamma(alpha: f64, beta: f64, alpha0: f64, beta0: f64) -> Result<f64, NigError> {
    for v in [alpha, beta, alpha0, beta0] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(NigError::Domain { op: "kl_invgamma", value: v });
        }
    }
    Ok(alpha0 * (beta / beta0).ln() - (log_gamma_unchecked(alpha) - log_gamma_unchecked(alpha0))
        + (alpha - alpha0) * digamma_unchecked(alpha)
        - (beta - beta0) * alpha / beta)
}

/// Full NIG KL: inverse-gamma part plus expected conditional Gaussian part.
pub fn kl_nig(p: &NigParams, q: &NigPrior) -> Result<f64, NigError> {
    Ok(kl_invgamma(p.alpha, p.beta, q.alpha0, q.beta0)? + kl_gaussian_expected(p, q)?)
}

pub fn evidence_penalty(p: &NigParams, y: f64) -> Result<f64, NigError> {
    p.validate()?;
    Ok((y - p.gamma).abs() * (2.0 * p.nu + p.alpha))
}

/// `nll + λ · regularizer`.
pub fn total_loss(p: &NigParams, y: f64, prior: &NigPrior, lambda: f64, mode: RegularizerMode) -> Result<f64, NigError> {
    if !(lambda >= 0.0) {
        return Err(NigError::NegativeLambda(lambda));
    }
    let base = nll(p, y)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    let reg = match mode {
        RegularizerMode::Kl => kl_nig(p, prior)?,
        RegularizerMode::Evidence => evidence_penalty(p, y)?,
    };
    Ok(base + lambda * reg)
}

/// Aleatoric `E[σ²] = β/(α-1)` and epistemic `Var[μ] = β/(ν(α-1))`.
pub fn uncertainty(p: &NigParams) -> Result<UncertaintyEstimate, NigError> {
    if !(p.alpha > 1.0) {
        return Err(NigError::Domain { op: "uncertainty", value: p.alpha });
    }
    p.validate()?;
    let aleatoric = p.beta / (p.alpha - 1.0);
    let epistemic = aleatoric / p.nu;
    Ok(UncertaintyEstimate { aleatoric, epistemic, total: aleatoric + epistemic })
}

/// `P(y ≥ threshold)` under the Student-t predictive.
pub fn prob_grade_geq(p: &NigParams, threshold: f64) -> Result<f64, NigError> {
    p.validate()?;
    let (loc, scale, dof) = p.student_t();
    let cdf = student_t_cdf(threshold, loc, scale, dof)?;
    Ok((1.0 - cdf).clamp(0.0, 1.0))
}
