//! Shared fixtures for the integration tests and the acceptance runner.
#![allow(dead_code)]

use factdpo::augmentation::PreferencePair;
use factdpo::config::{Hyperparams, Variant};
use factdpo::generation::SettingId;
use factdpo::objective::{variant_loss_grad, LogpQuad, MultiplierState};
use factdpo::policy::{AdapterConfig, ModelConfig, Packed, PolicyModel, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PROMPTS: [&str; 3] = [
    "CLAIM: Alice's city is Paris.\nEVIDENCE:\n- Alice's city is Rome.\nQUESTION: Does the Evidence contradict the CLAIM?\nANSWER:\n",
    "CLAIM: Bruno's age is 31.\nEVIDENCE:\n- Bruno's age is 31.\nQUESTION: Does the Evidence contradict the CLAIM?\nANSWER:\n",
    "CLAIM: Carla's pet is a cat.\nEVIDENCE:\n- Carla's pet is a dog.\nQUESTION: Does the Evidence contradict the CLAIM?\nANSWER:\n",
];

pub fn toy_pairs() -> Vec<PreferencePair> {
    let answers = [
        (
            "Yes, the city \"Paris\" was edited.",
            "No, the evidence agrees.",
        ),
        (
            "No, the evidence states the same age.",
            "Yes, the age was edited.",
        ),
        (
            "Yes, the pet \"cat\" was edited.",
            "No, the evidence agrees about the pet.",
        ),
    ];
    PROMPTS
        .iter()
        .zip(answers)
        .enumerate()
        .map(|(i, (p, (c, r)))| PreferencePair {
            record_id: format!("toy{i}"),
            prompt: p.to_string(),
            chosen: c.to_string(),
            rejected: r.to_string(),
            w: 5,
            k: 10,
            chosen_setting: SettingId::S2GivenYes,
            rejected_setting: SettingId::S3GivenNo,
        })
        .collect()
}

pub fn toy_tokenizer() -> Tokenizer {
    let pairs = toy_pairs();
    let texts: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.prompt.as_str(), p.chosen.as_str(), p.rejected.as_str()])
        .collect();
    Tokenizer::build(texts, 64)
}

/// Policy at the desk architecture with adapters drawn away from zero.
pub fn desk_policy(seed: u64, adapter_std: f64) -> PolicyModel {
    policy_with(ModelConfig::default(), seed, adapter_std)
}

/// Policy with the given architecture and desk adapters drawn away from zero.
pub fn policy_with(config: ModelConfig, seed: u64, adapter_std: f64) -> PolicyModel {
    let mut m = PolicyModel::new(config, AdapterConfig::default(), toy_tokenizer(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let params: Vec<f64> = m
        .adapters()
        .iter()
        .map(|_| adapter_std * (rng.random::<f64>() * 2.0 - 1.0))
        .collect();
    m.set_adapters(&params).unwrap();
    m
}

/// Small policy for loops that run many steps.
pub fn small_policy(seed: u64) -> PolicyModel {
    let cfg = ModelConfig {
        embed_dim: 8,
        layers: 1,
        context_len: 128,
        ..ModelConfig::default()
    };
    PolicyModel::new(
        cfg,
        AdapterConfig {
            rank: 2,
            alpha: 2.0,
        },
        toy_tokenizer(),
        seed,
    )
    .unwrap()
}

struct Encoded {
    seq: Packed,
    ref_c: f64,
    ref_r: f64,
}

fn encode_batch(model: &PolicyModel) -> Vec<Encoded> {
    let tok = model.tokenizer();
    toy_pairs()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let seq = Packed::pair(
                &tok.encode(&p.prompt),
                &tok.encode(&p.chosen),
                &tok.encode(&p.rejected),
            );
            // Reference values off the policy's own so the constraint terms are active.
            Encoded {
                seq,
                ref_c: -40.0 - i as f64,
                ref_r: -35.0 + i as f64,
            }
        })
        .collect()
}

/// Mean batch loss of a variant as a function of the adapters.
pub fn batch_loss(model: &PolicyModel, variant: Variant, mu: &MultiplierState) -> f64 {
    let hyper = Hyperparams::default();
    let batch = encode_batch(model);
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|e| {
            let f = model.forward(&e.seq).unwrap();
            let q = LogpQuad::new(f.logps[0], e.ref_c, f.logps[1], e.ref_r);
            variant_loss_grad(variant, &q, &hyper, mu).unwrap().0 / n
        })
        .sum()
}

/// Analytic adapter gradient of [`batch_loss`].
pub fn batch_grad(model: &PolicyModel, variant: Variant, mu: &MultiplierState) -> Vec<f64> {
    let hyper = Hyperparams::default();
    let batch = encode_batch(model);
    let n = batch.len() as f64;
    let mut eff = model.zero_grads();
    for e in &batch {
        let f = model.forward(&e.seq).unwrap();
        let q = LogpQuad::new(f.logps[0], e.ref_c, f.logps[1], e.ref_r);
        let (_, g, _) = variant_loss_grad(variant, &q, &hyper, mu).unwrap();
        model.backward(&e.seq, &f, &[g[0] / n, g[1] / n], &mut eff);
    }
    model.adapter_grads(&eff)
}

/// Result of a central finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub sampled: usize,
    pub compared: usize,
    pub worst_rel: f64,
}

/// Compares analytic and central-difference gradients on `samples` random adapter entries.
pub fn grad_check(variant: Variant, samples: usize, step: f64, seed: u64) -> GradCheck {
    grad_check_on(desk_policy(seed, 0.05), variant, samples, step, seed)
}

/// As [`grad_check`] on a caller-built policy.
pub fn grad_check_on(
    mut model: PolicyModel,
    variant: Variant,
    samples: usize,
    step: f64,
    seed: u64,
) -> GradCheck {
    let mu = MultiplierState::new(0.7, 1.3);
    let g = batch_grad(&model, variant, &mu);
    let base = model.adapters().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..samples {
        let i = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[i] = base[i] + step;
        model.set_adapters(&p).unwrap();
        let up = batch_loss(&model, variant, &mu);
        p[i] = base[i] - step;
        model.set_adapters(&p).unwrap();
        let down = batch_loss(&model, variant, &mu);
        let fd = (up - down) / (2.0 * step);
        if g[i].abs() > 1e-6 {
            compared += 1;
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(fd.abs()));
        }
    }
    model.set_adapters(&base).unwrap();
    GradCheck {
        sampled: samples,
        compared,
        worst_rel: worst,
    }
}
