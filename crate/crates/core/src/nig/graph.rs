//! NIG losses recorded on an autodiff tape, batched over samples.

use std::f64::consts::PI;

use super::{NigError, NigPrior, RegularizerMode, ACTIVATION_EPS};
use crate::diffcore::special::log_gamma_unchecked;
use crate::diffcore::{Array, Tape, Var};

/// Per-sample NIG parameters as length-`B` tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct NigVars {
    pub gamma: Var,
    pub nu: Var,
    pub alpha: Var,
    pub beta: Var,
}

/// Per-sample loss pieces (each length `B`).
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub nll: Var,
    pub regularizer: Var,
    pub total: Var,
}

/// Softplus activation of a `[B, 4]` raw head output.
pub fn activate(tape: &mut Tape, raw: Var) -> Result<NigVars, NigError> {
    let gamma = tape.column(raw, 0)?;
    let mut positive = |j: usize, shift: f64| -> Result<Var, NigError> {
        let c = tape.column(raw, j)?;
        let s = tape.softplus(c);
        Ok(tape.add_scalar(s, shift))
    };
    let nu = positive(1, ACTIVATION_EPS)?;
    let alpha = positive(2, 1.0 + ACTIVATION_EPS)?;
    let beta = positive(3, ACTIVATION_EPS)?;
    Ok(NigVars { gamma, nu, alpha, beta })
}

fn full_like(tape: &mut Tape, like: Var, value: f64) -> Var {
    let shape = tape.value(like).shape().to_vec();
    tape.constant(Array::full(&shape, value))
}

/// Per-sample closed-form NLL; `y` is a constant of the same length.
pub fn nll(tape: &mut Tape, p: &NigVars, y: Var) -> Result<Var, NigError> {
    // Ω = 2β(1+ν)
    let one_plus_nu = tape.add_scalar(p.nu, 1.0);
    let two_beta = tape.scale(p.beta, 2.0);
    let omega = tape.mul(two_beta, one_plus_nu)?;
    let ln_omega = tape.ln(omega)?;

    let ln_nu = tape.ln(p.nu)?;
    let t1 = tape.scale(ln_nu, -0.5);
    let t1 = tape.add_scalar(t1, 0.5 * PI.ln());

    let t2 = tape.mul(p.alpha, ln_omega)?;

    let resid = tape.sub(y, p.gamma)?;
    let resid2 = tape.square(resid);
    let nu_r2 = tape.mul(p.nu, resid2)?;
    let inner = tape.add(nu_r2, omega)?;
    let ln_inner = tape.ln(inner)?;
    let alpha_half = tape.add_scalar(p.alpha, 0.5);
    let t3 = tape.mul(alpha_half, ln_inner)?;

    let lg_a = tape.log_gamma(p.alpha)?;
    let lg_ah = tape.log_gamma(alpha_half)?;

    let s = tape.sub(t1, t2)?;
    let s = tape.add(s, t3)?;
    let s = tape.add(s, lg_a)?;
    Ok(tape.sub(s, lg_ah)?)
}

/// Per-sample `KL[NIG(p) ‖ NIG(prior)]`.
pub fn kl_nig(tape: &mut Tape, p: &NigVars, prior: &NigPrior) -> Result<Var, NigError> {
    prior.validate()?;
    let NigPrior { gamma0, nu0, alpha0, beta0 } = *prior;

    // Inverse-gamma part:
    // α₀ ln β − α₀ ln β₀ − lnΓ(α) + lnΓ(α₀) + (α−α₀)ψ(α) − α + β₀·α/β
    let ln_beta = tape.ln(p.beta)?;
    let a = tape.scale(ln_beta, alpha0);
    let a = tape.add_scalar(a, -alpha0 * beta0.ln() + log_gamma_unchecked(alpha0));
    let lg = tape.log_gamma(p.alpha)?;
    let a = tape.sub(a, lg)?;
    let psi = tape.digamma(p.alpha)?;
    let shifted = tape.add_scalar(p.alpha, -alpha0);
    let b = tape.mul(shifted, psi)?;
    let a = tape.add(a, b)?;
    let a = tape.sub(a, p.alpha)?;
    let alpha_over_beta = tape.div(p.alpha, p.beta)?;
    let c = tape.scale(alpha_over_beta, beta0);
    let kl_ig = tape.add(a, c)?;

    // Expected Gaussian part: ½(ν₀/ν − ln ν₀ + ln ν − 1) + ½ν₀(γ−γ₀)²·α/β
    let nu0c = full_like(tape, p.nu, nu0);
    let ratio = tape.div(nu0c, p.nu)?;
    let ln_nu = tape.ln(p.nu)?;
    let g = tape.add(ratio, ln_nu)?;
    let g = tape.add_scalar(g, -nu0.ln() - 1.0);
    let g = tape.scale(g, 0.5);
    let d = tape.add_scalar(p.gamma, -gamma0);
    let d2 = tape.square(d);
    let m = tape.mul(d2, alpha_over_beta)?;
    let m = tape.scale(m, 0.5 * nu0);
    let kl_gauss = tape.add(g, m)?;

    Ok(tape.add(kl_ig, kl_gauss)?)
}

/// Per-sample `|y − γ|·(2ν + α)`.
pub fn evidence_penalty(tape: &mut Tape, p: &NigVars, y: Var) -> Result<Var, NigError> {
    let err = tape.sub(y, p.gamma)?;
    let err = tape.abs(err);
    let two_nu = tape.scale(p.nu, 2.0);
    let ev = tape.add(two_nu, p.alpha)?;
    Ok(tape.mul(err, ev)?)
}

/// Per-sample `nll + λ·regularizer`. With `λ = 0` the regularizer is
/// still recorded (for reporting) but does not enter `total`.
pub fn total_loss(
    tape: &mut Tape,
    p: &NigVars,
    y: Var,
    prior: &NigPrior,
    lambda: f64,
    mode: RegularizerMode,
) -> Result<LossTerms, NigError> {
    if !(lambda >= 0.0) {
        return Err(NigError::NegativeLambda(lambda));
    }
    let nll = nll(tape, p, y)?;
    let regularizer = match mode {
        RegularizerMode::Kl => kl_nig(tape, p, prior)?,
        RegularizerMode::Evidence => evidence_penalty(tape, p, y)?,
    };
    let total = if lambda == 0.0 {
        nll
    } else {
        let weighted = tape.scale(regularizer, lambda);
        tape.add(nll, weighted)?
    };
    Ok(LossTerms { nll, regularizer, total })
}
