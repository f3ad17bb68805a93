//! DPO, the constrained Lagrangian objective, multiplier updates and ablation losses.

use serde::{Deserialize, Serialize};

use crate::config::{Hyperparams, Variant};
use crate::error::{Error, Result};

/// Sequence log-probabilities of one pair under the policy and the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogpQuad {
    pub lp_theta_chosen: f64,
    pub lp_ref_chosen: f64,
    pub lp_theta_rejected: f64,
    pub lp_ref_rejected: f64,
}

impl LogpQuad {
    pub fn new(
        lp_theta_chosen: f64,
        lp_ref_chosen: f64,
        lp_theta_rejected: f64,
        lp_ref_rejected: f64,
    ) -> Self {
        LogpQuad {
            lp_theta_chosen,
            lp_ref_chosen,
            lp_theta_rejected,
            lp_ref_rejected,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        let all = [
            self.lp_theta_chosen,
            self.lp_ref_chosen,
            self.lp_theta_rejected,
            self.lp_ref_rejected,
        ];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("log-probabilities {all:?}")))
        }
    }

    /// `lpθ(chosen) − lpref(chosen)`.
    pub fn delta_chosen(&self) -> f64 {
        self.lp_theta_chosen - self.lp_ref_chosen
    }

    /// `lpθ(rejected) − lpref(rejected)`.
    pub fn delta_rejected(&self) -> f64 {
        self.lp_theta_rejected - self.lp_ref_rejected
    }

    pub fn margin(&self) -> f64 {
        self.delta_chosen() - self.delta_rejected()
    }
}

/// Non-negative Lagrange multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiplierState {
    pub mu1: f64,
    pub mu2: f64,
}

impl MultiplierState {
    pub fn new(mu1: f64, mu2: f64) -> Self {
        MultiplierState { mu1, mu2 }
    }

    pub fn splat(mu: f64) -> Self {
        MultiplierState { mu1: mu, mu2: mu }
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `σ(x)` without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−ln σ(β·margin)`.
pub fn dpo_loss(q: &LogpQuad, beta: f64) -> Result<f64> {
    q.check_finite()?;
    if !(beta > 0.0) {
        return Err(Error::Precondition("beta must be positive".into()));
    }
    Ok(-log_sigmoid(beta * q.margin()))
}

/// `(C_chosen, C_rejected)`; each is ≤ 0 when its advantage requirement is met.
pub fn constraints(q: &LogpQuad, a1: f64, a2: f64) -> Result<(f64, f64)> {
    q.check_finite()?;
    if !(a1 >= 0.0) {
        return Err(Error::Precondition("a1 must be >= 0".into()));
    }
    if !(0.0..1.0).contains(&a2) {
        return Err(Error::Precondition("a2 must lie in [0, 1)".into()));
    }
    Ok((
        -q.delta_chosen() + a1.ln_1p(),
        q.delta_rejected() - (-a2).ln_1p(),
    ))
}

/// `dpo_loss + ln σ(β·(μ1·C_chosen + μ2·C_rejected))`.
pub fn improved_dpo_loss(
    q: &LogpQuad,
    beta: f64,
    a1: f64,
    a2: f64,
    mu: &MultiplierState,
) -> Result<f64> {
    Ok(improved_with_grad(q, beta, a1, a2, mu)?.0)
}

/// Loss and its derivatives with respect to `lpθ(chosen)` and `lpθ(rejected)`.
fn improved_with_grad(
    q: &LogpQuad,
    beta: f64,
    a1: f64,
    a2: f64,
    mu: &MultiplierState,
) -> Result<(f64, [f64; 2])> {
    check_mu(mu)?;
    let (dpo, [gc, gr]) = dpo_with_grad(q, beta)?;
    let (cc, cr) = constraints(q, a1, a2)?;
    let s = mu.mu1 * cc + mu.mu2 * cr;
    let term = log_sigmoid(beta * s);
    let w = beta * sigmoid(-beta * s);
    Ok((dpo + term, [gc - mu.mu1 * w, gr + mu.mu2 * w]))
}

fn dpo_with_grad(q: &LogpQuad, beta: f64) -> Result<(f64, [f64; 2])> {
    let loss = dpo_loss(q, beta)?;
    let w = beta * sigmoid(-beta * q.margin());
    Ok((loss, [-w, w]))
}

fn check_mu(mu: &MultiplierState) -> Result<()> {
    if mu.mu1 >= 0.0 && mu.mu2 >= 0.0 && mu.mu1.is_finite() && mu.mu2.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "multipliers must be finite and >= 0, got {mu:?}"
        )))
    }
}

/// `μ ← max(μ − lr_μ·C, 0)` per multiplier.
pub fn update_multipliers(
    mu: &MultiplierState,
    c_chosen: f64,
    c_rejected: f64,
    lr_mu: f64,
) -> MultiplierState {
    MultiplierState {
        mu1: (mu.mu1 - lr_mu * c_chosen).max(0.0),
        mu2: (mu.mu2 - lr_mu * c_rejected).max(0.0),
    }
}

/// Sign-flipped update `μ ← max(μ + lr_μ·C, 0)`, kept for study only.
pub fn update_multipliers_dual_ascent(
    mu: &MultiplierState,
    c_chosen: f64,
    c_rejected: f64,
    lr_mu: f64,
) -> MultiplierState {
    update_multipliers(mu, -c_chosen, -c_rejected, lr_mu)
}

/// Negative log-likelihood of the chosen completion.
pub fn sft_loss(lp_theta_chosen: f64) -> f64 {
    -lp_theta_chosen
}

/// Per-pair loss for a variant and whether the variant updates the multipliers.
pub fn variant_loss(
    variant: Variant,
    q: &LogpQuad,
    hyper: &Hyperparams,
    mu: &MultiplierState,
) -> Result<(f64, bool)> {
    let (loss, _, update) = variant_loss_grad(variant, q, hyper, mu)?;
    Ok((loss, update))
}

/// As [`variant_loss`], plus `[∂L/∂lpθ(chosen), ∂L/∂lpθ(rejected)]`.
pub fn variant_loss_grad(
    variant: Variant,
    q: &LogpQuad,
    hyper: &Hyperparams,
    mu: &MultiplierState,
) -> Result<(f64, [f64; 2], bool)> {
    match variant {
        Variant::Improved => {
            let (l, g) = improved_with_grad(q, hyper.beta, hyper.a1, hyper.a2, mu)?;
            Ok((l, g, true))
        }
        Variant::AdvZero => {
            let (l, g) = improved_with_grad(q, hyper.beta, 0.0, 0.0, mu)?;
            Ok((l, g, true))
        }
        Variant::PlainDpo => {
            let (l, g) = dpo_with_grad(q, hyper.beta)?;
            Ok((l, g, false))
        }
        Variant::FixedMu => {
            let (l, g) = improved_with_grad(q, hyper.beta, hyper.a1, hyper.a2, mu)?;
            Ok((l, g, false))
        }
        Variant::Sft | Variant::LabelOnly => {
            if !q.lp_theta_chosen.is_finite() {
                return Err(Error::NonFinite(format!(
                    "log-probability {}",
                    q.lp_theta_chosen
                )));
            }
            Ok((sft_loss(q.lp_theta_chosen), [-1.0, 0.0], false))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn at_ref() -> LogpQuad {
        LogpQuad::new(-3.0, -3.0, -5.0, -5.0)
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        assert!((dpo_loss(&at_ref(), 0.1).unwrap() - LN2).abs() < 1e-15);
        assert!(dpo_loss(&LogpQuad::new(f64::NAN, 0.0, 0.0, 0.0), 0.1).is_err());
    }

    #[test]
    fn constraint_values() {
        let (c, r) = constraints(&at_ref(), 0.1, 0.1).unwrap();
        assert!((c - 1.1f64.ln()).abs() < 1e-15);
        assert!((r + 0.9f64.ln()).abs() < 1e-15);
        assert_eq!(constraints(&at_ref(), 0.0, 0.0).unwrap(), (0.0, 0.0));
        assert!(constraints(&at_ref(), 0.1, 1.0).is_err());
        let boundary = LogpQuad::new(1.1f64.ln(), 0.0, 0.0, 0.0);
        assert!(constraints(&boundary, 0.1, 0.1).unwrap().0.abs() < 1e-16);
    }

    #[test]
    fn adv_zero_cancels_exactly() {
        let h = Hyperparams::default();
        let (l, update) = variant_loss(
            Variant::AdvZero,
            &at_ref(),
            &h,
            &MultiplierState::splat(1.0),
        )
        .unwrap();
        assert_eq!(l, 0.0);
        assert!(update);
    }

    #[test]
    fn zero_multipliers_reduce_to_dpo() {
        let h = Hyperparams::default();
        let q = LogpQuad::new(-2.0, -2.5, -4.0, -3.1);
        let zero = MultiplierState::splat(0.0);
        let (li, gi, _) = variant_loss_grad(Variant::FixedMu, &q, &h, &zero).unwrap();
        let (ld, gd, _) = variant_loss_grad(Variant::PlainDpo, &q, &h, &zero).unwrap();
        assert_eq!(li, ld - LN2);
        assert_eq!(gi, gd);
    }

    #[test]
    fn multiplier_examples() {
        let m = update_multipliers(&MultiplierState::splat(1.0), 0.095310, 0.0, 0.1);
        assert!((m.mu1 - 0.990469).abs() < 1e-12);
        assert_eq!(
            update_multipliers(&MultiplierState::splat(0.001), 0.095310, 0.0, 0.1).mu1,
            0.0
        );
        let m = update_multipliers(&MultiplierState::splat(0.5), -0.05, -0.05, 0.1);
        assert!((m.mu1 - 0.505).abs() < 1e-15);
        let d = update_multipliers_dual_ascent(&MultiplierState::splat(0.5), 0.05, 0.05, 0.1);
        assert!((d.mu1 - 0.505).abs() < 1e-15);
    }

    #[test]
    fn sft_values() {
        assert_eq!(sft_loss(-2.3), 2.3);
        assert_eq!(sft_loss(0.0), 0.0);
    }
}
