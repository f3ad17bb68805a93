//! Training loop: seeded batching, the learning-rate schedule, multiplier updates, early stopping,
//! trajectory logging and resumable checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{LabelTarget, PreferencePair};
use crate::claims::Label;
use crate::config::{Hyperparams, Variant};
use crate::error::{Error, Result};
use crate::objective::{
    constraints, dpo_loss, update_multipliers, update_multipliers_dual_ascent, variant_loss_grad,
    LogpQuad, MultiplierState,
};
use crate::policy::{
    clone_reference, load_checkpoint, save_checkpoint, Packed, PolicyModel, ReferenceModel, EOS,
};
use crate::util::derive_seed;

/// Column header of the metrics file.
pub const METRICS_HEADER: &str =
    "step,loss,lr,mu1,mu2,val_lp_theta_chosen,val_lp_theta_rejected,val_lp_ref_chosen,val_lp_ref_rejected";

/// Column header of the per-step trace file.
pub const TRACE_HEADER: &str = "step,loss,lr,c_bar_chosen,c_bar_rejected,mu1,mu2";

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Loop controls that are not model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub max_steps: u64,
    pub eval_every: u64,
    /// Evaluations without improvement before stopping; 0 disables early stopping.
    pub patience: u32,
    pub min_delta: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Divide sequence log-probabilities by their token counts.
    pub length_normalize: bool,
    /// Use the sign-flipped multiplier update.
    pub dual_ascent: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            max_steps: 30_000,
            eval_every: 100,
            patience: 10,
            min_delta: 1e-4,
            optimizer: Optimizer::Sgd,
            grad_clip: 0.0,
            length_normalize: false,
            dual_ascent: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "max_steps and eval_every must be >= 1".into(),
            ));
        }
        if !(self.min_delta >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("min_delta and grad_clip must be >= 0".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Language-model warm-up of the base weights before adapters are attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    /// Optimisation steps; 0 skips the warm-up.
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Also train on the prompt tokens.
    pub score_prompt: bool,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            steps: 0,
            lr: 0.5,
            batch: 20,
            grad_clip: 1.0,
            score_prompt: true,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && (self.batch == 0 || !(self.lr > 0.0)) {
            return Err(Error::Config("warmup needs batch >= 1 and lr > 0".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("warmup grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// Trains the base weights on per-token NLL of both completions of every example (and
/// optionally its prompt), so each prompt sees both answers equally often. Returns the mean loss of the final 100 steps.
pub fn format_warmup(
    model: &mut PolicyModel,
    data: &TrainData,
    cfg: &WarmupConfig,
    seed: u64,
) -> Result<f64> {
    if cfg.steps == 0 {
        return Ok(f64::NAN);
    }
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition(
            "warmup needs at least one example".into(),
        ));
    }
    let tok = model.tokenizer().clone();
    let mut seqs: Vec<Packed> = match data {
        TrainData::Pairs(pairs) => pairs
            .iter()
            .map(|p| {
                Packed::pair(
                    &tok.encode(&p.prompt),
                    &with_eos(tok.encode(&p.chosen)),
                    &with_eos(tok.encode(&p.rejected)),
                )
            })
            .collect(),
        TrainData::Targets(targets) => {
            let yes = with_eos(tok.encode(Label::Refutes.answer_token()));
            let no = with_eos(tok.encode(Label::Supports.answer_token()));
            targets
                .iter()
                .map(|t| Packed::pair(&tok.encode(&t.prompt), &yes, &no))
                .collect()
        }
    };
    if cfg.score_prompt {
        seqs = seqs.into_iter().map(Packed::with_prompt_scored).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "warmup"));
    let bsz = cfg.batch as f64;
    let mut tail = Vec::new();
    for step in 0..cfg.steps {
        let mut eff = model.zero_grads();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let seq = &seqs[rng.random_range(0..seqs.len())];
            let fwd = model.forward(seq)?;
            let counts = seq.target_counts();
            let mut up = vec![0.0; seq.branches()];
            for b in 0..seq.branches() {
                let n = counts[b].max(1) as f64 * seq.branches() as f64;
                loss -= fwd.logps[b] / (n * bsz);
                up[b] = -1.0 / (n * bsz);
            }
            model.backward(seq, &fwd, &up, &mut eff);
        }
        if !loss.is_finite() || eff.mats.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("warmup step {}", step + 1)));
        }
        if cfg.grad_clip > 0.0 {
            let norm = eff.mats.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                eff.mats.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        model.base_step(&eff, cfg.lr);
        if cfg.steps - step <= 100 {
            tail.push(loss);
        }
    }
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Resumable loop state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub lr_current: f64,
    pub mu: MultiplierState,
    pub best_validation_loss: Option<f64>,
    pub best_step: u64,
    pub patience_counter: u32,
    pub rng_seed: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub mu_updates: u64,
    pub stopped_early: bool,
    interval_loss_sum: f64,
    interval_steps: u64,
}

/// One row per evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub lr: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub val_lp_theta_chosen: f64,
    pub val_lp_theta_rejected: f64,
    pub val_lp_ref_chosen: f64,
    pub val_lp_ref_rejected: f64,
    /// Quantity used for early stopping.
    pub val_loss: f64,
}

/// One entry per optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Batch-mean constraints fed to the multiplier update.
    pub c_bar_chosen: f64,
    pub c_bar_rejected: f64,
    /// Multipliers after this step's update.
    pub mu1: f64,
    pub mu2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
    pub steps: Vec<StepRecord>,
}

impl TrajectoryLog {
    /// Metrics file contents.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.loss,
                r.lr,
                r.mu1,
                r.mu2,
                r.val_lp_theta_chosen,
                r.val_lp_theta_rejected,
                r.val_lp_ref_chosen,
                r.val_lp_ref_rejected
            );
        }
        s
    }

    /// Per-step trace contents.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step, r.loss, r.lr, r.c_bar_chosen, r.c_bar_rejected, r.mu1, r.mu2
            );
        }
        s
    }
}

/// Tokenised example with cached reference log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub record_id: String,
    pub prompt: Vec<u32>,
    /// Chosen completion (or label target) followed by EOS.
    pub chosen: Vec<u32>,
    /// Rejected completion followed by EOS; absent for label targets.
    pub rejected: Option<Vec<u32>>,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

/// Raw training data for one variant family.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainData {
    Pairs(Vec<PreferencePair>),
    Targets(Vec<LabelTarget>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Pairs(p) => p.len(),
            TrainData::Targets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn with_eos(mut ids: Vec<u32>) -> Vec<u32> {
    ids.push(EOS);
    ids
}

/// Tokenises data and caches reference log-probabilities.
pub fn prepare(reference: &ReferenceModel, data: &TrainData) -> Result<Vec<TrainExample>> {
    let tok = reference.model().tokenizer();
    match data {
        TrainData::Pairs(pairs) => pairs
            .iter()
            .map(|p| {
                let prompt = tok.encode(&p.prompt);
                let chosen = with_eos(tok.encode(&p.chosen));
                let rejected = with_eos(tok.encode(&p.rejected));
                let f = reference.forward(&Packed::pair(&prompt, &chosen, &rejected))?;
                Ok(TrainExample {
                    record_id: p.record_id.clone(),
                    prompt,
                    chosen,
                    rejected: Some(rejected),
                    ref_chosen: f.logps[0],
                    ref_rejected: f.logps[1],
                })
            })
            .collect(),
        TrainData::Targets(targets) => targets
            .iter()
            .map(|t| {
                let prompt = tok.encode(&t.prompt);
                let chosen = with_eos(tok.encode(&t.target));
                let f = reference.forward(&Packed::single(&prompt, &chosen))?;
                Ok(TrainExample {
                    record_id: t.record_id.clone(),
                    prompt,
                    chosen,
                    rejected: None,
                    ref_chosen: f.logps[0],
                    ref_rejected: 0.0,
                })
            })
            .collect(),
    }
}

/// Means of the four log-probability streams plus the two stopping losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValStats {
    pub n: usize,
    pub lp_theta_chosen: f64,
    pub lp_theta_rejected: f64,
    pub lp_ref_chosen: f64,
    pub lp_ref_rejected: f64,
    /// Mean plain DPO loss (0 when there are no rejected completions).
    pub dpo_loss: f64,
    /// Mean negative log-likelihood of the chosen completions.
    pub nll_chosen: f64,
}

/// Order-independent mean: values are summed in sorted order.
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn normalizer(ex: &TrainExample, on: bool) -> [f64; 2] {
    if on {
        [
            ex.chosen.len() as f64,
            ex.rejected.as_ref().map_or(1, Vec::len) as f64,
        ]
    } else {
        [1.0, 1.0]
    }
}

fn quad_for(ex: &TrainExample, logps: &[f64], norm: [f64; 2]) -> LogpQuad {
    LogpQuad::new(
        logps[0] / norm[0],
        ex.ref_chosen / norm[0],
        logps.get(1).copied().unwrap_or(0.0) / norm[1],
        ex.ref_rejected / norm[1],
    )
}

fn packed(ex: &TrainExample, need_rejected: bool) -> Packed {
    match (&ex.rejected, need_rejected) {
        (Some(r), true) => Packed::pair(&ex.prompt, &ex.chosen, r),
        _ => Packed::single(&ex.prompt, &ex.chosen),
    }
}

/// Validation statistics over prepared examples.
pub fn evaluate_examples(
    model: &PolicyModel,
    examples: &[TrainExample],
    beta: f64,
) -> Result<ValStats> {
    if examples.is_empty() {
        return Err(Error::Precondition("validation set is empty".into()));
    }
    let has_rejected = examples.iter().all(|e| e.rejected.is_some());
    let mut cols: [Vec<f64>; 6] = Default::default();
    for ex in examples {
        let f = model.forward(&packed(ex, has_rejected))?;
        let q = quad_for(ex, &f.logps, [1.0, 1.0]);
        q.check_finite()?;
        cols[0].push(q.lp_theta_chosen);
        cols[1].push(q.lp_theta_rejected);
        cols[2].push(q.lp_ref_chosen);
        cols[3].push(q.lp_ref_rejected);
        cols[4].push(if has_rejected {
            dpo_loss(&q, beta)?
        } else {
            0.0
        });
        cols[5].push(-q.lp_theta_chosen);
    }
    let [a, b, c, d, e, g] = cols.map(sorted_mean);
    Ok(ValStats {
        n: examples.len(),
        lp_theta_chosen: a,
        lp_theta_rejected: b,
        lp_ref_chosen: c,
        lp_ref_rejected: d,
        dpo_loss: e,
        nll_chosen: g,
    })
}

/// Validation statistics of `model` against `reference` on preference pairs.
pub fn evaluate_logps(
    model: &PolicyModel,
    reference: &ReferenceModel,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<ValStats> {
    if pairs.is_empty() {
        return Err(Error::Precondition("validation set is empty".into()));
    }
    let examples = prepare(reference, &TrainData::Pairs(pairs.to_vec()))?;
    evaluate_examples(model, &examples, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Everything beyond the model that a resumed run needs.
#[derive(Serialize, Deserialize)]
struct ResumeBlob {
    hyper: Hyperparams,
    config: TrainerConfig,
    state: TrainState,
    log: TrajectoryLog,
    best_adapters: Vec<f64>,
    reference_adapters: Vec<f64>,
    adam: Option<AdamState>,
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Policy carrying the best-validation adapters.
    pub model: PolicyModel,
    pub log: TrajectoryLog,
    pub state: TrainState,
    /// Validation statistics of the returned model.
    pub final_validation: ValStats,
}

/// A training run that can be stepped, checkpointed and resumed.
pub struct Trainer {
    hyper: Hyperparams,
    config: TrainerConfig,
    model: PolicyModel,
    reference_adapters: Vec<f64>,
    train: Vec<TrainExample>,
    val: Vec<TrainExample>,
    state: TrainState,
    log: TrajectoryLog,
    best_adapters: Vec<f64>,
    order: Vec<usize>,
    adam: Option<AdamState>,
}

fn check_data(variant: Variant, data: &TrainData, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Precondition(format!("{what} set is empty")));
    }
    match (variant, data) {
        (Variant::LabelOnly, TrainData::Targets(_)) => Ok(()),
        (Variant::LabelOnly, TrainData::Pairs(_)) => Err(Error::Precondition(format!(
            "label_only needs label targets for the {what} set"
        ))),
        (_, TrainData::Pairs(_)) => Ok(()),
        (v, TrainData::Targets(_)) => Err(Error::Precondition(format!(
            "variant {} needs preference pairs for the {what} set",
            v.name()
        ))),
    }
}

impl Trainer {
    pub fn new(
        model: PolicyModel,
        reference: &ReferenceModel,
        train: &TrainData,
        val: &TrainData,
        hyper: Hyperparams,
        config: TrainerConfig,
    ) -> Result<Self> {
        hyper.validate()?;
        config.validate()?;
        check_data(hyper.variant, train, "training")?;
        check_data(hyper.variant, val, "validation")?;
        let r = reference.model();
        if r.config() != model.config()
            || r.adapter_config() != model.adapter_config()
            || r.tokenizer() != model.tokenizer()
        {
            return Err(Error::Precondition(
                "policy and reference differ in config or tokenizer".into(),
            ));
        }
        let state = TrainState {
            step: 0,
            lr_current: 0.0,
            mu: MultiplierState::splat(hyper.mu_init),
            best_validation_loss: None,
            best_step: 0,
            patience_counter: 0,
            rng_seed: hyper.seed,
            epoch: 0,
            cursor: 0,
            mu_updates: 0,
            stopped_early: false,
            interval_loss_sum: 0.0,
            interval_steps: 0,
        };
        let adam = match config.optimizer {
            Optimizer::Adam { .. } => Some(AdamState {
                m: vec![0.0; model.adapters().len()],
                v: vec![0.0; model.adapters().len()],
                t: 0,
            }),
            Optimizer::Sgd => None,
        };
        Ok(Trainer {
            train: prepare(reference, train)?,
            val: prepare(reference, val)?,
            reference_adapters: r.adapters().to_vec(),
            best_adapters: model.adapters().to_vec(),
            model,
            hyper,
            config,
            state,
            log: TrajectoryLog::default(),
            order: Vec::new(),
            adam,
        })
    }

    /// Restores a run saved with [`Trainer::save`]; the data must be the same as for the original run.
    pub fn resume(path: impl AsRef<Path>, train: &TrainData, val: &TrainData) -> Result<Self> {
        let path = path.as_ref();
        let (model, extra) = load_checkpoint(path)?;
        let corrupt = |detail: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            detail,
        };
        let blob: ResumeBlob =
            serde_json::from_value(extra.ok_or_else(|| corrupt("no training state".into()))?)
                .map_err(|e| corrupt(format!("training state: {e}")))?;
        let mut ref_model = model.clone();
        ref_model
            .set_adapters(&blob.reference_adapters)
            .map_err(|e| corrupt(e.to_string()))?;
        let reference = clone_reference(&ref_model);
        let mut t = Trainer::new(model, &reference, train, val, blob.hyper, blob.config)?;
        if blob.best_adapters.len() != t.model.adapters().len() {
            return Err(corrupt("best adapters have the wrong length".into()));
        }
        t.state = blob.state;
        t.log = blob.log;
        t.best_adapters = blob.best_adapters;
        t.adam = blob.adam;
        if t.state.epoch > 0 {
            t.order = t.permutation(t.state.epoch);
        }
        Ok(t)
    }

    /// Writes a resumable checkpoint of the current (not the best) parameters.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let blob = ResumeBlob {
            hyper: self.hyper.clone(),
            config: self.config.clone(),
            state: self.state.clone(),
            log: self.log.clone(),
            best_adapters: self.best_adapters.clone(),
            reference_adapters: self.reference_adapters.clone(),
            adam: self.adam.clone(),
        };
        save_checkpoint(&self.model, path, Some(serde_json::to_value(blob)?))
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &TrajectoryLog {
        &self.log
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn is_done(&self) -> bool {
        self.state.stopped_early || self.state.step >= self.config.max_steps
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.hyper.seed, &format!("epoch{epoch}")));
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.hyper.batch_size.min(self.train.len());
        if self.order.is_empty() || self.state.cursor + b > self.order.len() {
            self.state.epoch += 1;
            self.order = self.permutation(self.state.epoch);
            self.state.cursor = 0;
        }
        let batch = self.order[self.state.cursor..self.state.cursor + b].to_vec();
        self.state.cursor += b;
        batch
    }

    /// Runs until `limit` steps (capped by `max_steps`) or early stopping.
    pub fn run_until(&mut self, limit: u64) -> Result<()> {
        let limit = limit.min(self.config.max_steps);
        while !self.state.stopped_early && self.state.step < limit {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.max_steps)
    }

    /// Takes one optimisation step, evaluating when due.
    pub fn step(&mut self) -> Result<()> {
        let variant = self.hyper.variant;
        let step = self.state.step + 1;
        let lr = self.hyper.lr_at(step);
        let batch = self.next_batch();
        let bsz = batch.len() as f64;
        let (a1, a2) = match variant {
            Variant::AdvZero => (0.0, 0.0),
            _ => (self.hyper.a1, self.hyper.a2),
        };
        let mut eff = self.model.zero_grads();
        let mut loss_sum = 0.0;
        let (mut cc_sum, mut cr_sum) = (0.0, 0.0);
        let mut quads = Vec::with_capacity(batch.len());
        let mut update_mu = false;
        for &i in &batch {
            let ex = &self.train[i];
            let seq = packed(ex, variant.is_preference());
            let fwd = self.model.forward(&seq)?;
            let norm = normalizer(ex, self.config.length_normalize);
            let q = quad_for(ex, &fwd.logps, norm);
            quads.push((ex.record_id.clone(), q));
            let (loss, g, upd) = variant_loss_grad(variant, &q, &self.hyper, &self.state.mu)
                .map_err(|e| self.dump(step, &quads, e))?;
            update_mu = upd;
            if !loss.is_finite() {
                return Err(self.dump(step, &quads, Error::NonFinite(format!("loss {loss}"))));
            }
            if variant.is_preference() {
                let (cc, cr) = constraints(&q, a1, a2)?;
                cc_sum += cc;
                cr_sum += cr;
            }
            loss_sum += loss;
            let upstream: Vec<f64> = (0..seq.branches())
                .map(|b| g[b] / (norm[b] * bsz))
                .collect();
            self.model.backward(&seq, &fwd, &upstream, &mut eff);
        }
        let mut grad = self.model.adapter_grads(&eff);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(self.dump(step, &quads, Error::NonFinite("gradient".into())));
        }
        if self.config.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.config.grad_clip {
                let s = self.config.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.apply(&grad, lr);

        let loss = loss_sum / bsz;
        let (c_bar_chosen, c_bar_rejected) = (cc_sum / bsz, cr_sum / bsz);
        if update_mu {
            let update = if self.config.dual_ascent {
                update_multipliers_dual_ascent
            } else {
                update_multipliers
            };
            self.state.mu = update(
                &self.state.mu,
                c_bar_chosen,
                c_bar_rejected,
                self.hyper.lr_mu,
            );
            self.state.mu_updates += 1;
        }
        self.state.step = step;
        self.state.lr_current = lr;
        self.state.interval_loss_sum += loss;
        self.state.interval_steps += 1;
        self.log.steps.push(StepRecord {
            step,
            loss,
            lr,
            c_bar_chosen,
            c_bar_rejected,
            mu1: self.state.mu.mu1,
            mu2: self.state.mu.mu2,
        });
        if step.is_multiple_of(self.config.eval_every) || step == self.config.max_steps {
            self.evaluate()?;
        }
        Ok(())
    }

    fn apply(&mut self, grad: &[f64], lr: f64) {
        match (self.config.optimizer, self.adam.as_mut()) {
            (Optimizer::Adam { beta1, beta2, eps }, Some(st)) => {
                st.t += 1;
                let c1 = 1.0 - beta1.powi(st.t as i32);
                let c2 = 1.0 - beta2.powi(st.t as i32);
                let mut dir = vec![0.0; grad.len()];
                for (i, g) in grad.iter().enumerate() {
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    dir[i] = (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                }
                self.model.apply_step(&dir, lr);
            }
            _ => self.model.apply_step(grad, lr),
        }
    }

    fn dump(&self, step: u64, quads: &[(String, LogpQuad)], cause: Error) -> Error {
        let mut s = format!("step {step}, mu {:?}: {cause}; batch:", self.state.mu);
        for (id, q) in quads {
            let _ = write!(
                s,
                " [{id}: theta_c {} ref_c {} theta_r {} ref_r {}]",
                q.lp_theta_chosen, q.lp_ref_chosen, q.lp_theta_rejected, q.lp_ref_rejected
            );
        }
        Error::NonFinite(s)
    }

    fn evaluate(&mut self) -> Result<()> {
        let stats = evaluate_examples(&self.model, &self.val, self.hyper.beta)?;
        let val_loss = if self.hyper.variant.is_preference() {
            stats.dpo_loss
        } else {
            stats.nll_chosen
        };
        let st = &mut self.state;
        self.log.rows.push(LogRow {
            step: st.step,
            loss: st.interval_loss_sum / st.interval_steps.max(1) as f64,
            lr: st.lr_current,
            mu1: st.mu.mu1,
            mu2: st.mu.mu2,
            val_lp_theta_chosen: stats.lp_theta_chosen,
            val_lp_theta_rejected: stats.lp_theta_rejected,
            val_lp_ref_chosen: stats.lp_ref_chosen,
            val_lp_ref_rejected: stats.lp_ref_rejected,
            val_loss,
        });
        st.interval_loss_sum = 0.0;
        st.interval_steps = 0;
        let improved = st
            .best_validation_loss
            .is_none_or(|b| val_loss < b - self.config.min_delta);
        if improved {
            st.best_validation_loss = Some(val_loss);
            st.best_step = st.step;
            st.patience_counter = 0;
            self.best_adapters = self.model.adapters().to_vec();
        } else {
            st.patience_counter += 1;
            if self.config.patience > 0 && st.patience_counter >= self.config.patience {
                st.stopped_early = true;
            }
        }
        Ok(())
    }

    /// Ends the run, returning the policy with the best-validation adapters.
    pub fn finish(mut self) -> Result<TrainOutcome> {
        self.model.set_adapters(&self.best_adapters)?;
        let final_validation = evaluate_examples(&self.model, &self.val, self.hyper.beta)?;
        Ok(TrainOutcome {
            final_validation,
            model: self.model,
            log: self.log,
            state: self.state,
        })
    }
}

/// Trains to completion.
pub fn train(
    model: PolicyModel,
    reference: &ReferenceModel,
    train_data: &TrainData,
    val_data: &TrainData,
    hyper: Hyperparams,
    config: TrainerConfig,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, reference, train_data, val_data, hyper, config)?;
    t.run()?;
    t.finish()
}
