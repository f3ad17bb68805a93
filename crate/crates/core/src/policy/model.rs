//! Pre-norm decoder-only transformer with low-rank adapters and hand-derived gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linalg::{dot, log_sum_exp, matmul, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::tokenizer::{Tokenizer, BOS};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
    pub mlp_ratio: usize,
    /// Logits pass through `cap * tanh(z / cap)`; 0 disables the cap.
    pub logit_cap: f64,
    /// Standard deviation of base weights; 0 selects `1/sqrt(embed_dim)`.
    pub init_std: f64,
    /// Start each layer with identical query and key projections.
    pub tied_qk_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            embed_dim: 32,
            layers: 2,
            heads: 2,
            context_len: 512,
            mlp_ratio: 4,
            logit_cap: 0.0,
            init_std: 0.0,
            tied_qk_init: true,
        }
    }
}

/// Low-rank adapter shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 8,
            alpha: 8.0,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapted matrices within one layer, in slot order.
pub const LAYER_SLOTS: [&str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];
const Q: usize = 0;
const K: usize = 1;
const V: usize = 2;
const O: usize = 3;
const UP: usize = 4;
const DOWN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct LayerNorms {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Frozen base parameters.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BaseWeights {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub norms: Vec<LayerNorms>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    /// Adaptable matrices: per layer the six [`LAYER_SLOTS`], then the output head.
    pub mats: Vec<Vec<f64>>,
}

/// Placement of one adapter pair inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub rows: usize,
    pub cols: usize,
    pub a_off: usize,
    pub b_off: usize,
}

/// A token sequence with a shared prefix and up to two branches that never see each other.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed {
    tokens: Vec<u32>,
    positions: Vec<usize>,
    branch: Vec<u8>,
    /// (row whose output predicts the token, token, branch)
    targets: Vec<(usize, u32, u8)>,
    branches: usize,
}

impl Packed {
    /// `BOS ⧺ prompt ⧺ completion`, scoring the completion as branch 0.
    pub fn single(prompt: &[u32], completion: &[u32]) -> Packed {
        Self::build(prompt, &[completion])
    }

    /// Prompt shared by two completions, scored as branches 0 and 1.
    pub fn pair(prompt: &[u32], chosen: &[u32], rejected: &[u32]) -> Packed {
        Self::build(prompt, &[chosen, rejected])
    }

    fn build(prompt: &[u32], completions: &[&[u32]]) -> Packed {
        let mut p = Packed {
            tokens: Vec::with_capacity(
                1 + prompt.len() + completions.iter().map(|c| c.len()).sum::<usize>(),
            ),
            positions: Vec::new(),
            branch: Vec::new(),
            targets: Vec::new(),
            branches: completions.len(),
        };
        p.tokens.push(BOS);
        p.tokens.extend_from_slice(prompt);
        p.positions.extend(0..p.tokens.len());
        p.branch.resize(p.tokens.len(), 0);
        let last_prompt_row = p.tokens.len() - 1;
        for (b, comp) in completions.iter().enumerate() {
            let mut prev = last_prompt_row;
            for (t, &tok) in comp.iter().enumerate() {
                p.targets.push((prev, tok, b as u8));
                let row = p.tokens.len();
                p.tokens.push(tok);
                p.positions.push(last_prompt_row + 1 + t);
                p.branch.push(b as u8 + 1);
                prev = row;
            }
        }
        p
    }

    /// Adds the prompt tokens (after BOS) as one more scored branch.
    pub fn with_prompt_scored(mut self) -> Packed {
        let b = self.branches as u8;
        let prompt_rows = self.branch.iter().take_while(|&&br| br == 0).count();
        for row in 1..prompt_rows {
            self.targets.push((row - 1, self.tokens[row], b));
        }
        self.branches += 1;
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    /// Number of scored tokens in each branch.
    pub fn target_counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.branches];
        for &(_, _, b) in &self.targets {
            n[b as usize] += 1;
        }
        n
    }

    /// Largest position index plus one.
    pub fn span(&self) -> usize {
        self.positions.iter().max().map_or(0, |m| m + 1)
    }

    #[inline]
    fn visible(&self, i: usize, j: usize) -> bool {
        j <= i && (self.branch[j] == 0 || self.branch[j] == self.branch[i])
    }
}

struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × T × T attention weights (zero where masked).
    att: Vec<f64>,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Forward {
    /// Summed log-probability of each branch's tokens.
    pub logps: Vec<f64>,
    layers: Vec<LayerCache>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    hf: Vec<f64>,
    /// Per target: softmax over capped logits.
    probs: Vec<Vec<f64>>,
    /// Per target: tanh(z / cap), or empty when uncapped.
    tanh: Vec<Vec<f64>>,
    t: usize,
}

/// Gradients with respect to each adapted effective matrix.
#[derive(Debug, Clone)]
pub struct EffGrads {
    pub(crate) mats: Vec<Vec<f64>>,
}

impl EffGrads {
    pub fn zero(&mut self) {
        for m in &mut self.mats {
            m.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Trainable policy: frozen base, low-rank adapters and the tokenizer they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub(crate) config: ModelConfig,
    pub(crate) adapter_config: AdapterConfig,
    pub(crate) tokenizer: Tokenizer,
    pub(crate) seed: u64,
    pub(crate) base: BaseWeights,
    pub(crate) adapters: Vec<f64>,
    pub(crate) slots: Vec<Slot>,
    eff: Vec<Vec<f64>>,
}

fn layer_norm(
    x: &[f64],
    t: usize,
    d: usize,
    g: &[f64],
    b: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    let mut y = vec![0.0; t * d];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let xh = (row[c] - mean) * r;
            xhat[i * d + c] = xh;
            y[i * d + c] = xh * g[c] + b[c];
        }
    }
    (xhat, rstd, y)
}

/// Adds the input gradient of a layer norm to `dx`.
fn layer_norm_back(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    t: usize,
    d: usize,
    dx: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let dyr = &dy[i * d..(i + 1) * d];
        let xr = &xhat[i * d..(i + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            dxhat[c] = dyr[c] * g[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xr[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for c in 0..d {
            dx[i * d + c] += rstd[i] * (dxhat[c] - m1 - xr[c] * m2);
        }
    }
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

impl PolicyModel {
    /// Fresh model: random base weights, `A` random and `B` zero so adapters start as the identity.
    pub fn new(
        mut config: ModelConfig,
        adapter_config: AdapterConfig,
        tokenizer: Tokenizer,
        seed: u64,
    ) -> Result<Self> {
        config.vocab_size = tokenizer.vocab_size();
        Self::check_config(&config, &adapter_config)?;
        let d = config.embed_dim;
        let f = d * config.mlp_ratio;
        let vsz = config.vocab_size;
        let std = if config.init_std > 0.0 {
            config.init_std
        } else {
            1.0 / (d as f64).sqrt()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("positive std");
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| normal.sample(rng)).collect()
        };

        let tok_emb = draw(vsz * d, &mut rng);
        let pos_emb = draw(config.context_len * d, &mut rng);
        let mut mats = Vec::new();
        let mut norms = Vec::new();
        for _ in 0..config.layers {
            let wq = draw(d * d, &mut rng);
            let wk = if config.tied_qk_init {
                wq.clone()
            } else {
                draw(d * d, &mut rng)
            };
            mats.push(wq);
            mats.push(wk);
            mats.push(draw(d * d, &mut rng));
            mats.push(draw(d * d, &mut rng));
            mats.push(draw(d * f, &mut rng));
            mats.push(draw(f * d, &mut rng));
            norms.push(LayerNorms {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                b1: vec![0.0; f],
                b2: vec![0.0; d],
            });
        }
        mats.push(draw(d * vsz, &mut rng));
        let base = BaseWeights {
            tok_emb,
            pos_emb,
            norms,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
            mats,
        };
        let slots = Self::layout(&config, &adapter_config);
        let adapters = Self::init_adapters(&slots, adapter_config.rank, &mut rng);
        let mut model = PolicyModel {
            config,
            adapter_config,
            tokenizer,
            seed,
            base,
            adapters,
            slots,
            eff: Vec::new(),
        };
        model.refresh();
        Ok(model)
    }

    fn init_adapters(slots: &[Slot], rank: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let total = slots.last().map_or(0, |s| s.b_off + rank * s.cols);
        let mut adapters = vec![0.0; total];
        for s in slots {
            let a_normal = Normal::new(0.0, 1.0 / (s.rows as f64).sqrt()).expect("positive std");
            for v in &mut adapters[s.a_off..s.a_off + s.rows * rank] {
                *v = a_normal.sample(rng);
            }
        }
        adapters
    }

    /// Replaces the adapters with a fresh identity-preserving set of the given shape, keeping the base.
    pub fn reinit_adapters(&mut self, adapter_config: AdapterConfig, seed: u64) -> Result<()> {
        Self::check_config(&self.config, &adapter_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.slots = Self::layout(&self.config, &adapter_config);
        self.adapters = Self::init_adapters(&self.slots, adapter_config.rank, &mut rng);
        self.adapter_config = adapter_config;
        self.refresh();
        Ok(())
    }

    pub(crate) fn check_config(config: &ModelConfig, adapter: &AdapterConfig) -> Result<()> {
        if config.embed_dim == 0
            || config.layers == 0
            || config.heads == 0
            || config.context_len < 2
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !config.embed_dim.is_multiple_of(config.heads) {
            return Err(Error::Config("embed_dim must be divisible by heads".into()));
        }
        if adapter.rank == 0 || !(adapter.alpha > 0.0) {
            return Err(Error::Config(
                "adapter rank and alpha must be positive".into(),
            ));
        }
        if config.logit_cap < 0.0 || config.mlp_ratio == 0 {
            return Err(Error::Config(
                "logit_cap must be >= 0 and mlp_ratio >= 1".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn slot_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
        let d = config.embed_dim;
        let f = d * config.mlp_ratio;
        let mut shapes = Vec::new();
        for _ in 0..config.layers {
            shapes.extend([(d, d), (d, d), (d, d), (d, d), (d, f), (f, d)]);
        }
        shapes.push((d, config.vocab_size));
        shapes
    }

    pub(crate) fn layout(config: &ModelConfig, adapter: &AdapterConfig) -> Vec<Slot> {
        let r = adapter.rank;
        let mut off = 0;
        Self::slot_shapes(config)
            .into_iter()
            .map(|(rows, cols)| {
                let s = Slot {
                    rows,
                    cols,
                    a_off: off,
                    b_off: off + rows * r,
                };
                off += rows * r + r * cols;
                s
            })
            .collect()
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        adapter_config: AdapterConfig,
        tokenizer: Tokenizer,
        seed: u64,
        base: BaseWeights,
        adapters: Vec<f64>,
    ) -> Result<Self> {
        Self::check_config(&config, &adapter_config)?;
        let slots = Self::layout(&config, &adapter_config);
        let mut model = PolicyModel {
            config,
            adapter_config,
            tokenizer,
            seed,
            base,
            adapters,
            slots,
            eff: Vec::new(),
        };
        model.refresh();
        Ok(model)
    }

    /// Recomputes effective weights `W + (alpha/r)·A·B` after the adapters change.
    pub fn refresh(&mut self) {
        let r = self.adapter_config.rank;
        let scale = self.adapter_config.scale();
        self.eff = self
            .slots
            .iter()
            .zip(&self.base.mats)
            .map(|(s, w)| {
                let a = &self.adapters[s.a_off..s.a_off + s.rows * r];
                let b = &self.adapters[s.b_off..s.b_off + r * s.cols];
                let ab = matmul(a, b, s.rows, r, s.cols);
                w.iter()
                    .zip(&ab)
                    .map(|(wv, abv)| wv + scale * abv)
                    .collect()
            })
            .collect();
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adapter_config(&self) -> &AdapterConfig {
        &self.adapter_config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Flat adapter parameters: for each slot, `A` then `B`, row-major.
    pub fn adapters(&self) -> &[f64] {
        &self.adapters
    }

    /// Replaces the adapter parameters.
    pub fn set_adapters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.adapters.len() {
            return Err(Error::Precondition(format!(
                "expected {} adapter parameters, got {}",
                self.adapters.len(),
                params.len()
            )));
        }
        self.adapters.copy_from_slice(params);
        self.refresh();
        Ok(())
    }

    /// `params -= step · grad`, then refresh the effective weights.
    pub fn apply_step(&mut self, grad: &[f64], step: f64) {
        for (p, g) in self.adapters.iter_mut().zip(grad) {
            *p -= step * g;
        }
        self.refresh();
    }

    /// `W -= step · dW` on the base matrices, then refresh the effective weights.
    pub fn base_step(&mut self, eff: &EffGrads, step: f64) {
        for (w, g) in self.base.mats.iter_mut().zip(&eff.mats) {
            for (wv, gv) in w.iter_mut().zip(g) {
                *wv -= step * gv;
            }
        }
        self.refresh();
    }

    pub fn zero_grads(&self) -> EffGrads {
        EffGrads {
            mats: self
                .slots
                .iter()
                .map(|s| vec![0.0; s.rows * s.cols])
                .collect(),
        }
    }

    fn check_fits(&self, seq: &Packed) -> Result<()> {
        if seq.span() > self.config.context_len {
            return Err(Error::ContextOverflow {
                needed: seq.span(),
                context_len: self.config.context_len,
            });
        }
        Ok(())
    }

    fn capped(&self, z: f64) -> (f64, f64) {
        let cap = self.config.logit_cap;
        if cap > 0.0 {
            let th = (z / cap).tanh();
            (cap * th, th)
        } else {
            (z, 0.0)
        }
    }

    /// Final hidden states for every row plus per-layer caches.
    fn trunk(&self, seq: &Packed) -> (Vec<LayerCache>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.config.embed_dim;
        let h = self.config.heads;
        let dh = d / h;
        let f = d * self.config.mlp_ratio;
        let t = seq.len();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; t * d];
        for i in 0..t {
            let te = &self.base.tok_emb[seq.tokens[i] as usize * d..][..d];
            let pe = &self.base.pos_emb[seq.positions[i] * d..][..d];
            for c in 0..d {
                x[i * d + c] = te[c] + pe[c];
            }
        }
        let mut caches = Vec::with_capacity(self.config.layers);
        let mut scores = vec![0.0; t];
        for (l, norms) in self.base.norms.iter().enumerate() {
            let w = &self.eff[l * 6..(l + 1) * 6];
            let (xhat1, rstd1, h1) = layer_norm(&x, t, d, &norms.ln1_g, &norms.ln1_b);
            let q = matmul(&h1, &w[Q], t, d, d);
            let k = matmul(&h1, &w[K], t, d, d);
            let v = matmul(&h1, &w[V], t, d, d);
            let mut att = vec![0.0; h * t * t];
            let mut o = vec![0.0; t * d];
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..t {
                    let qi = &q[i * d + off..i * d + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if seq.visible(i, j) {
                            let s = dot(qi, &k[j * d + off..j * d + off + dh]) * inv_sqrt;
                            scores[j] = s;
                            mx = mx.max(s);
                        }
                    }
                    let row = &mut att[(hd * t + i) * t..(hd * t + i + 1) * t];
                    let mut z = 0.0;
                    for j in 0..=i {
                        if seq.visible(i, j) {
                            let e = (scores[j] - mx).exp();
                            row[j] = e;
                            z += e;
                        }
                    }
                    let oi = &mut o[i * d + off..i * d + off + dh];
                    for j in 0..=i {
                        if row[j] != 0.0 {
                            row[j] /= z;
                            let p = row[j];
                            let vj = &v[j * d + off..j * d + off + dh];
                            for c in 0..dh {
                                oi[c] += p * vj[c];
                            }
                        }
                    }
                }
            }
            matmul_acc(&o, &w[O], &mut x, t, d, d);
            let (xhat2, rstd2, h2) = layer_norm(&x, t, d, &norms.ln2_g, &norms.ln2_b);
            let mut u = vec![0.0; t * f];
            for i in 0..t {
                u[i * f..(i + 1) * f].copy_from_slice(&norms.b1);
            }
            matmul_acc(&h2, &w[UP], &mut u, t, d, f);
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            for i in 0..t {
                for c in 0..d {
                    x[i * d + c] += norms.b2[c];
                }
            }
            matmul_acc(&g, &w[DOWN], &mut x, t, f, d);
            caches.push(LayerCache {
                xhat1,
                rstd1,
                h1,
                q,
                k,
                v,
                att,
                o,
                xhat2,
                rstd2,
                h2,
                u,
                g,
            });
        }
        let (xhatf, rstdf, hf) = layer_norm(&x, t, d, &self.base.lnf_g, &self.base.lnf_b);
        (caches, xhatf, rstdf, hf)
    }

    /// Capped logits over the vocabulary for one hidden row.
    fn head(&self, hrow: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let vsz = self.config.vocab_size;
        let z = matmul(hrow, self.eff.last().unwrap(), 1, hrow.len(), vsz);
        let mut logits = Vec::with_capacity(vsz);
        let mut th = Vec::new();
        for &zv in &z {
            let (l, tv) = self.capped(zv);
            logits.push(l);
            if self.config.logit_cap > 0.0 {
                th.push(tv);
            }
        }
        (logits, th)
    }

    /// Forward pass computing each branch's summed log-probability.
    pub fn forward(&self, seq: &Packed) -> Result<Forward> {
        self.check_fits(seq)?;
        let d = self.config.embed_dim;
        let (layers, xhatf, rstdf, hf) = self.trunk(seq);
        let mut logps = vec![0.0; seq.branches];
        let mut probs = Vec::with_capacity(seq.targets.len());
        let mut tanh = Vec::with_capacity(seq.targets.len());
        for &(row, tok, b) in &seq.targets {
            let (logits, th) = self.head(&hf[row * d..(row + 1) * d]);
            let lse = log_sum_exp(&logits);
            logps[b as usize] += logits[tok as usize] - lse;
            probs.push(logits.iter().map(|l| (l - lse).exp()).collect());
            tanh.push(th);
        }
        Ok(Forward {
            logps,
            layers,
            xhatf,
            rstdf,
            hf,
            probs,
            tanh,
            t: seq.len(),
        })
    }

    /// Backpropagates `upstream[b] = ∂L/∂logp_b` into effective-weight gradients.
    pub fn backward(&self, seq: &Packed, fwd: &Forward, upstream: &[f64], grads: &mut EffGrads) {
        let d = self.config.embed_dim;
        let h = self.config.heads;
        let dh = d / h;
        let f = d * self.config.mlp_ratio;
        let vsz = self.config.vocab_size;
        let t = fwd.t;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let n_slots = self.slots.len();
        let head_w = &self.eff[n_slots - 1];

        // Output head.
        let mut dhf = vec![0.0; t * d];
        let mut dz = vec![0.0; vsz];
        for (ti, &(row, tok, b)) in seq.targets.iter().enumerate() {
            let up = upstream[b as usize];
            if up == 0.0 {
                continue;
            }
            let p = &fwd.probs[ti];
            let th = &fwd.tanh[ti];
            for c in 0..vsz {
                let onehot = if c == tok as usize { 1.0 } else { 0.0 };
                let dl = up * (onehot - p[c]);
                dz[c] = if th.is_empty() {
                    dl
                } else {
                    dl * (1.0 - th[c] * th[c])
                };
            }
            let hrow = &fwd.hf[row * d..(row + 1) * d];
            matmul_tn_acc(hrow, &dz, &mut grads.mats[n_slots - 1], 1, d, vsz);
            matmul_nt_acc(&dz, head_w, &mut dhf[row * d..(row + 1) * d], 1, vsz, d);
        }
        let mut dx = vec![0.0; t * d];
        layer_norm_back(
            &dhf,
            &fwd.xhatf,
            &fwd.rstdf,
            &self.base.lnf_g,
            t,
            d,
            &mut dx,
        );

        for l in (0..self.config.layers).rev() {
            let c = &fwd.layers[l];
            let norms = &self.base.norms[l];
            let w = &self.eff[l * 6..(l + 1) * 6];
            let gm = &mut grads.mats[l * 6..(l + 1) * 6];

            // MLP: x_out = x_mid + gelu(LN2(x_mid)·W1 + b1)·W2 + b2
            matmul_tn_acc(&c.g, &dx, &mut gm[DOWN], t, f, d);
            let mut du = vec![0.0; t * f];
            matmul_nt_acc(&dx, &w[DOWN], &mut du, t, d, f);
            for (dv, &uv) in du.iter_mut().zip(&c.u) {
                *dv *= gelu_grad(uv);
            }
            matmul_tn_acc(&c.h2, &du, &mut gm[UP], t, d, f);
            let mut dh2 = vec![0.0; t * d];
            matmul_nt_acc(&du, &w[UP], &mut dh2, t, f, d);
            layer_norm_back(&dh2, &c.xhat2, &c.rstd2, &norms.ln2_g, t, d, &mut dx);

            // Attention: x_mid = x_in + attn(LN1(x_in))·Wo
            matmul_tn_acc(&c.o, &dx, &mut gm[O], t, d, d);
            let mut d_o = vec![0.0; t * d];
            matmul_nt_acc(&dx, &w[O], &mut d_o, t, d, d);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..t {
                    let row = &c.att[(hd * t + i) * t..(hd * t + i + 1) * t];
                    let doi = &d_o[i * d + off..i * d + off + dh];
                    let mut s = 0.0;
                    for j in 0..=i {
                        if row[j] != 0.0 {
                            let vj = &c.v[j * d + off..j * d + off + dh];
                            dp[j] = dot(doi, vj);
                            s += row[j] * dp[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for e in 0..dh {
                                dvj[e] += row[j] * doi[e];
                            }
                        }
                    }
                    for j in 0..=i {
                        if row[j] != 0.0 {
                            let ds = row[j] * (dp[j] - s) * inv_sqrt;
                            for e in 0..dh {
                                dq[i * d + off + e] += ds * c.k[j * d + off + e];
                                dk[j * d + off + e] += ds * c.q[i * d + off + e];
                            }
                        }
                    }
                }
            }
            matmul_tn_acc(&c.h1, &dq, &mut gm[Q], t, d, d);
            matmul_tn_acc(&c.h1, &dk, &mut gm[K], t, d, d);
            matmul_tn_acc(&c.h1, &dv, &mut gm[V], t, d, d);
            let mut dh1 = vec![0.0; t * d];
            matmul_nt_acc(&dq, &w[Q], &mut dh1, t, d, d);
            matmul_nt_acc(&dk, &w[K], &mut dh1, t, d, d);
            matmul_nt_acc(&dv, &w[V], &mut dh1, t, d, d);
            layer_norm_back(&dh1, &c.xhat1, &c.rstd1, &norms.ln1_g, t, d, &mut dx);
        }
    }

    /// Chain rule from effective-weight gradients to the flat adapter gradient.
    pub fn adapter_grads(&self, eff: &EffGrads) -> Vec<f64> {
        let r = self.adapter_config.rank;
        let scale = self.adapter_config.scale();
        let mut out = vec![0.0; self.adapters.len()];
        for (s, dw) in self.slots.iter().zip(&eff.mats) {
            let a = &self.adapters[s.a_off..s.a_off + s.rows * r];
            let b = &self.adapters[s.b_off..s.b_off + r * s.cols];
            // dA = scale · dW · Bᵀ
            let da = &mut out[s.a_off..s.a_off + s.rows * r];
            matmul_nt_acc(dw, b, da, s.rows, s.cols, r);
            da.iter_mut().for_each(|v| *v *= scale);
            // dB = scale · Aᵀ · dW
            let db = &mut out[s.b_off..s.b_off + r * s.cols];
            matmul_tn_acc(a, dw, db, s.rows, r, s.cols);
            db.iter_mut().for_each(|v| *v *= scale);
        }
        out
    }

    /// Token-id form of [`PolicyModel::logprob`].
    pub fn logprob_ids(&self, prompt: &[u32], completion: &[u32]) -> Result<f64> {
        if completion.is_empty() {
            return Err(Error::Precondition("completion must be non-empty".into()));
        }
        Ok(self.forward(&Packed::single(prompt, completion))?.logps[0])
    }

    /// `sum_t log P(completion_t | prompt, completion_<t)`.
    pub fn logprob(&self, prompt: &str, completion: &str) -> Result<f64> {
        self.logprob_ids(
            &self.tokenizer.encode(prompt),
            &self.tokenizer.encode(completion),
        )
    }

    /// Capped next-token logits after `BOS ⧺ ids`.
    pub fn next_logits(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let seq = Packed::single(ids, &[]);
        self.check_fits(&seq)?;
        let d = self.config.embed_dim;
        let (_, _, _, hf) = self.trunk(&seq);
        let last = seq.len() - 1;
        Ok(self.head(&hf[last * d..(last + 1) * d]).0)
    }

    /// Capped logits at every position of `BOS ⧺ ids`, row-major.
    pub fn all_logits(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let seq = Packed::single(ids, &[]);
        self.check_fits(&seq)?;
        let d = self.config.embed_dim;
        let (_, _, _, hf) = self.trunk(&seq);
        Ok((0..seq.len())
            .flat_map(|i| self.head(&hf[i * d..(i + 1) * d]).0)
            .collect())
    }
}
