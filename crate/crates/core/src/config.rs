//! Hyperparameters and training variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training objective variant; each non-default one is an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Lagrangian DPO with multiplier updates.
    #[default]
    Improved,
    /// Improved objective with both advantages set to zero.
    #[serde(alias = "adv-zero")]
    AdvZero,
    /// Plain DPO.
    #[serde(alias = "plain-dpo")]
    PlainDpo,
    /// Improved objective with multipliers frozen at `mu_init`.
    #[serde(alias = "fixed-mu")]
    FixedMu,
    /// Supervised fine-tuning on the chosen completion.
    Sft,
    /// Supervised fine-tuning on the answer token alone.
    #[serde(alias = "label-only")]
    LabelOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Improved,
        Variant::AdvZero,
        Variant::PlainDpo,
        Variant::FixedMu,
        Variant::Sft,
        Variant::LabelOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Improved => "improved",
            Variant::AdvZero => "adv-zero",
            Variant::PlainDpo => "plain-dpo",
            Variant::FixedMu => "fixed-mu",
            Variant::Sft => "sft",
            Variant::LabelOnly => "label-only",
        }
    }

    /// Preference variants consume chosen/rejected pairs.
    pub fn is_preference(self) -> bool {
        !matches!(self, Variant::Sft | Variant::LabelOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Optimisation and sampling hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub beta: f64,
    pub a1: f64,
    pub a2: f64,
    pub lr: f64,
    pub lr_mu: f64,
    pub warmup_steps: u64,
    pub decay: f64,
    pub batch_size: usize,
    pub num_generations: usize,
    pub n_min: usize,
    pub n_base: usize,
    pub max_new_tokens: usize,
    pub mu_init: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            beta: 0.1,
            a1: 0.1,
            a2: 0.1,
            lr: 1e-4,
            lr_mu: 0.01,
            warmup_steps: 200,
            decay: 0.999,
            batch_size: 20,
            num_generations: 10,
            n_min: 1,
            n_base: 10,
            max_new_tokens: 512,
            mu_init: 1.0,
            seed: 0,
            variant: Variant::Improved,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta > 0.0) {
            return fail("beta must be positive");
        }
        if !(self.a1 >= 0.0) {
            return fail("a1 must be >= 0");
        }
        if !(self.a2 >= 0.0 && self.a2 < 1.0) {
            return fail("a2 must lie in [0, 1)");
        }
        if !(self.lr > 0.0) || !(self.lr_mu > 0.0) {
            return fail("lr and lr_mu must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail("decay must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.num_generations == 0 || self.n_min == 0 || self.n_base == 0
        {
            return fail("batch_size, num_generations, n_min and n_base must be >= 1");
        }
        if self.max_new_tokens == 0 {
            return fail("max_new_tokens must be >= 1");
        }
        if !(self.mu_init >= 0.0) {
            return fail("mu_init must be >= 0");
        }
        Ok(())
    }

    /// Learning rate at a 1-based step: linear warmup, then per-step decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            self.lr * step as f64 / self.warmup_steps as f64
        } else {
            self.lr * self.decay.powi((step - self.warmup_steps) as i32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_warmup_and_decay() {
        let h = Hyperparams::default();
        assert!((h.lr_at(100) - 5e-5).abs() < 1e-18);
        assert!((h.lr_at(200) - 1e-4).abs() < 1e-18);
        assert!((h.lr_at(201) - 1e-4 * 0.999).abs() < 1e-18);
        assert!((h.lr_at(700) - 1e-4 * 0.999f64.powi(500)).abs() < 1e-18);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("plain_dpo".parse::<Variant>().unwrap(), Variant::PlainDpo);
        assert!("nope".parse::<Variant>().is_err());
    }
}
