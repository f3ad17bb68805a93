//! Trainable policy, frozen reference and decoding.

mod checkpoint;
mod linalg;
mod model;
mod tokenizer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use model::{
    AdapterConfig, EffGrads, Forward, ModelConfig, Packed, PolicyModel, Slot, LAYER_SLOTS,
};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};

/// Frozen copy of a policy; exposes only read access.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    inner: PolicyModel,
}

impl ReferenceModel {
    pub fn model(&self) -> &PolicyModel {
        &self.inner
    }

    pub fn logprob(&self, prompt: &str, completion: &str) -> Result<f64> {
        self.inner.logprob(prompt, completion)
    }

    pub fn logprob_ids(&self, prompt: &[u32], completion: &[u32]) -> Result<f64> {
        self.inner.logprob_ids(prompt, completion)
    }

    pub fn forward(&self, seq: &Packed) -> Result<Forward> {
        self.inner.forward(seq)
    }
}

/// Snapshot of the policy whose outputs never change afterwards.
pub fn clone_reference(model: &PolicyModel) -> ReferenceModel {
    ReferenceModel {
        inner: model.clone(),
    }
}

impl From<&ReferenceModel> for ReferenceModel {
    fn from(r: &ReferenceModel) -> Self {
        r.clone()
    }
}

/// Greedy index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Decodes up to `max_new_tokens` ids after the prompt, stopping at EOS (which is not returned).
pub fn sample_ids(
    model: &PolicyModel,
    prompt: &[u32],
    max_new_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    if !(temperature >= 0.0) {
        return Err(Error::Precondition("temperature must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let logits = model.next_logits(&ids)?;
        let tok = if temperature == 0.0 {
            argmax(&logits)
        } else {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits
                .iter()
                .map(|l| ((l - m) / temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick as u32
        };
        if tok == EOS {
            break;
        }
        ids.push(tok);
        out.push(tok);
    }
    Ok(out)
}

/// Text form of [`sample_ids`].
pub fn sample(
    model: &PolicyModel,
    prompt: &str,
    max_new_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<String> {
    let tok = model.tokenizer();
    let ids = sample_ids(
        model,
        &tok.encode(prompt),
        max_new_tokens,
        temperature,
        seed,
    )?;
    Ok(tok.decode(&ids))
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, Normal};

    use super::*;

    pub(crate) fn tiny_model(seed: u64) -> PolicyModel {
        let texts = [
            "Alice's city is Paris.",
            "Alice's city is Rome.",
            "Yes, the evidence",
            "No, the evidence",
        ];
        let tok = Tokenizer::build(texts.iter().copied(), 50);
        let cfg = ModelConfig {
            embed_dim: 8,
            context_len: 64,
            ..ModelConfig::default()
        };
        let mut m = PolicyModel::new(
            cfg,
            AdapterConfig {
                rank: 2,
                alpha: 4.0,
            },
            tok,
            seed,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let n = Normal::new(0.0, 0.3).unwrap();
        let params: Vec<f64> = m.adapters().iter().map(|_| n.sample(&mut rng)).collect();
        m.set_adapters(&params).unwrap();
        m
    }

    #[test]
    fn pair_packing_matches_separate_sequences() {
        let m = tiny_model(3);
        let tok = m.tokenizer();
        let p = tok.encode("Alice's city is Paris.");
        let c = tok.encode("Yes, the evidence");
        let r = tok.encode("No, the");
        let fwd = m.forward(&Packed::pair(&p, &c, &r)).unwrap();
        let lc = m.logprob_ids(&p, &c).unwrap();
        let lr = m.logprob_ids(&p, &r).unwrap();
        assert!((fwd.logps[0] - lc).abs() < 1e-12, "{} {}", fwd.logps[0], lc);
        assert!((fwd.logps[1] - lr).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut m = tiny_model(5);
        let tok = m.tokenizer().clone();
        let p = tok.encode("Alice's city is Paris.");
        let c = tok.encode("Yes, the evidence");
        let r = tok.encode("No, the");
        let seq = Packed::pair(&p, &c, &r);
        let up = [0.7, -1.3];
        let loss = |m: &PolicyModel| {
            let f = m.forward(&seq).unwrap();
            up[0] * f.logps[0] + up[1] * f.logps[1]
        };
        let fwd = m.forward(&seq).unwrap();
        let mut eg = m.zero_grads();
        m.backward(&seq, &fwd, &up, &mut eg);
        let g = m.adapter_grads(&eg);
        let base = m.adapters().to_vec();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..base.len()).step_by(7) {
            let mut plus = base.clone();
            plus[i] += h;
            m.set_adapters(&plus).unwrap();
            let lp = loss(&m);
            let mut minus = base.clone();
            minus[i] -= h;
            m.set_adapters(&minus).unwrap();
            let lm = loss(&m);
            let fd = (lp - lm) / (2.0 * h);
            if g[i].abs().max(fd.abs()) > 1e-6 {
                worst = worst.max((fd - g[i]).abs() / g[i].abs().max(fd.abs()));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn reinit_adapters_keeps_the_base_function() {
        let mut m = tiny_model(7);
        let tok = m.tokenizer().clone();
        let p = tok.encode("Alice's city is Paris.");
        let c = tok.encode("Yes, the evidence");
        let mut plain = m.clone();
        plain
            .set_adapters(&vec![0.0; plain.adapters().len()])
            .unwrap();
        m.reinit_adapters(
            AdapterConfig {
                rank: 3,
                alpha: 6.0,
            },
            1,
        )
        .unwrap();
        assert_eq!(m.adapter_config().rank, 3);
        assert_ne!(m.adapters().len(), plain.adapters().len());
        let a = m.logprob_ids(&p, &c).unwrap();
        let b = plain.logprob_ids(&p, &c).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} {b}");
        assert!(m
            .reinit_adapters(
                AdapterConfig {
                    rank: 0,
                    alpha: 1.0
                },
                1
            )
            .is_err());
    }
}
