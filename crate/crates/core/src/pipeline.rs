//! Batch commands tying the modules together, driven by one run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::{
    build_label_only_targets, build_pairs, difficulty_weight, ingest_counterfactual, load_pairs,
    save_pairs, PairOptions, PreferencePair,
};
use crate::claims::{load_claims, save_claims, ClaimRecord, Split};
use crate::config::{Hyperparams, Variant};
use crate::error::{Error, Result};
use crate::eval::{cross_eval, evaluate, EvalReport, Prediction, DEFAULT_EVAL_TOKENS};
use crate::generation::{run_setting_cached, GenerationCache, GeneratorConfig, SettingId};
use crate::policy::{
    clone_reference, load_checkpoint, save_checkpoint, AdapterConfig, ModelConfig, PolicyModel,
    Tokenizer,
};
use crate::prompting::{build_prompt, PromptMode};
use crate::synth::{assign_splits, synthesize_with, SynthOptions};
use crate::trainer::{format_warmup, TrainData, Trainer, TrainerConfig, ValStats, WarmupConfig};
use crate::util::derive_seed;

/// File locations; relative paths resolve against the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `train.jsonl`, `validation.jsonl` and `test.jsonl`.
    pub claims: Option<PathBuf>,
    /// Extra counterfactual records merged into the training pool.
    pub counterfactuals: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub validation_pairs: Option<PathBuf>,
    /// Checkpoint evaluated by `eval` and `cross-eval`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub size: usize,
    pub contradiction_rate: f64,
    pub distractors: usize,
    pub shuffle_evidence: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            size: 2000,
            contradiction_rate: 0.5,
            distractors: 1,
            shuffle_evidence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub max_word_units: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            max_word_units: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_new_tokens: usize,
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_new_tokens: DEFAULT_EVAL_TOKENS,
            split: Split::Test,
        }
    }
}

/// Everything a run needs. `seed` drives every command; `hyper.seed` and
/// `generator.seed` are overwritten from it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub paths: Paths,
    pub synth: SynthSection,
    pub generator: GeneratorConfig,
    pub hyper: Hyperparams,
    pub pairs: PairOptions,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub warmup: WarmupConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses a TOML configuration file.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the run seed and checks every section.
    pub fn finalize(&mut self) -> Result<()> {
        self.hyper.seed = self.seed;
        self.generator.seed = self.seed;
        if self.out.as_os_str().is_empty() {
            self.out = PathBuf::from(".");
        }
        self.hyper.validate()?;
        self.generator.validate()?;
        self.warmup.validate()?;
        self.trainer
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.max_new_tokens == 0 {
            return Err(Error::Config("eval.max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }

    fn resolve(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        match p {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.out.join(p),
            None => self.out.join(default),
        }
    }

    pub fn claims_dir(&self) -> PathBuf {
        self.resolve(&self.paths.claims, ".")
    }

    pub fn generations_path(&self) -> PathBuf {
        self.resolve(&self.paths.generations, "generations.jsonl")
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.resolve(&self.paths.pairs, "pairs.jsonl")
    }

    pub fn validation_pairs_path(&self) -> PathBuf {
        match &self.paths.validation_pairs {
            Some(_) => self.resolve(&self.paths.validation_pairs, ""),
            None => self.pairs_path().with_extension("validation.jsonl"),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoint, "model.ckpt")
    }

    pub fn counterfactuals_path(&self) -> Option<PathBuf> {
        self.paths
            .counterfactuals
            .as_ref()
            .map(|_| self.resolve(&self.paths.counterfactuals, ""))
    }

    pub fn split_path(&self, split: Split) -> PathBuf {
        self.claims_dir().join(format!("{}.jsonl", split.as_str()))
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)
        .map_err(|e| Error::io(format!("creating {}", cfg.out.display()), e))
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<ClaimRecord>> {
    let p = cfg.split_path(split);
    require(&p, "claims file")?;
    load_claims(p)
}

/// Training pool: the train split plus ingested counterfactual records.
fn training_pool(cfg: &RunConfig) -> Result<(Vec<ClaimRecord>, Vec<String>)> {
    let mut pool = load_split(cfg, Split::Train)?;
    let mut warnings = Vec::new();
    if let Some(p) = cfg.counterfactuals_path() {
        require(&p, "counterfactual file")?;
        let ingested = ingest_counterfactual(p)?;
        warnings.extend(ingested.warnings.iter().cloned());
        crate::augmentation::merge_counterfactual(
            &mut pool,
            ingested,
            cfg.pairs.exclude_counterfactual,
        );
    }
    Ok((pool, warnings))
}

/// Writes the three split files; returns the number of records per split.
pub fn cmd_synth(cfg: &RunConfig) -> Result<[usize; 3]> {
    if cfg.synth.size == 0 {
        return Err(Error::Config("size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.synth.contradiction_rate) {
        return Err(Error::Config(
            "contradiction_rate must lie in [0, 1]".into(),
        ));
    }
    ensure_out(cfg)?;
    let opts = SynthOptions {
        size: cfg.synth.size,
        seed: cfg.seed,
        contradiction_rate: cfg.synth.contradiction_rate,
        distractors: cfg.synth.distractors,
        shuffle_evidence: cfg.synth.shuffle_evidence,
    };
    let mut records = synthesize_with(&opts);
    assign_splits(&mut records);
    let dir = cfg.claims_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut counts = [0; 3];
    for (i, split) in [Split::Train, Split::Validation, Split::Test]
        .into_iter()
        .enumerate()
    {
        let part: Vec<ClaimRecord> = records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect();
        counts[i] = part.len();
        save_claims(&part, cfg.split_path(split))?;
    }
    Ok(counts)
}

/// Outcome of a generation pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenSummary {
    pub records: usize,
    pub settings_run: usize,
    pub cache_hits: usize,
    pub backend_calls: usize,
    /// `(record id, error)` for records whose generation failed.
    pub failures: Vec<(String, String)>,
}

/// Runs every applicable setting for the training pool and validation split, filling the cache.
pub fn cmd_gen(cfg: &RunConfig) -> Result<GenSummary> {
    ensure_out(cfg)?;
    let (mut records, _) = training_pool(cfg)?;
    records.extend(load_split(cfg, Split::Validation)?);
    let path = cfg.generations_path();
    let mut cache = GenerationCache::load(&path)?;
    let generator = cfg.generator.build()?;
    let k = cfg.hyper.num_generations;
    let mut summary = GenSummary {
        records: records.len(),
        ..GenSummary::default()
    };
    for r in &records {
        for setting in SettingId::ALL {
            if !setting.applicable(r) {
                continue;
            }
            if cache.lookup(&r.id, setting, k).is_some() {
                summary.cache_hits += 1;
                continue;
            }
            match run_setting_cached(r, setting, generator.as_ref(), k, &mut cache) {
                Ok(rows) => {
                    GenerationCache::append(&rows, &path)?;
                    summary.settings_run += 1;
                }
                Err(e) => {
                    summary.failures.push((r.id.clone(), e.to_string()));
                    break;
                }
            }
        }
    }
    cache.save(&path)?;
    summary.backend_calls = generator.calls();
    Ok(summary)
}

/// Outcome of pair construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairsSummary {
    pub records: usize,
    pub pairs: usize,
    pub validation_pairs: usize,
    /// `(record id, reason)` for records that produced no pairs.
    pub skipped: Vec<(String, String)>,
}

fn pairs_for(
    records: &[ClaimRecord],
    cache: &GenerationCache,
    hyper: &Hyperparams,
    opts: &PairOptions,
    missing: &mut Vec<String>,
    skipped: &mut Vec<(String, String)>,
) -> Result<Vec<PreferencePair>> {
    let k = hyper.num_generations;
    let mut out = Vec::new();
    for r in records {
        if opts.exclude_counterfactual && r.counterfactual {
            skipped.push((r.id.clone(), "counterfactual record excluded".into()));
            continue;
        }
        let mut rows = Vec::new();
        for setting in SettingId::ALL {
            if !setting.applicable(r) {
                rows.push(Vec::new());
                continue;
            }
            match cache.lookup(&r.id, setting, k) {
                Some(v) => rows.push(v),
                None => {
                    missing.push(format!("{} setting {}", r.id, setting as u8));
                    rows.push(Vec::new());
                }
            }
        }
        if rows[0].is_empty() {
            continue;
        }
        let w = difficulty_weight(&rows[0], r.label)?;
        match build_pairs(r, &rows[1], &rows[2], &rows[3], w, k, hyper, opts) {
            Ok(p) => out.extend(p),
            Err(Error::MissingData(m)) => skipped.push((r.id.clone(), m)),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Builds training pairs (difficulty-weighted) and validation pairs (one per record).
pub fn cmd_pairs(cfg: &RunConfig) -> Result<PairsSummary> {
    ensure_out(cfg)?;
    let (pool, _) = training_pool(cfg)?;
    let val = load_split(cfg, Split::Validation)?;
    let gen_path = cfg.generations_path();
    require(&gen_path, "generations cache")?;
    let cache = GenerationCache::load(&gen_path)?;
    let mut missing = Vec::new();
    let mut skipped = Vec::new();
    let train_pairs = pairs_for(
        &pool,
        &cache,
        &cfg.hyper,
        &cfg.pairs,
        &mut missing,
        &mut skipped,
    )?;
    let val_opts = PairOptions {
        fixed_count: Some(1),
        exclude_counterfactual: false,
        ..cfg.pairs.clone()
    };
    let mut val_skipped = Vec::new();
    let val_pairs = pairs_for(
        &val,
        &cache,
        &cfg.hyper,
        &val_opts,
        &mut missing,
        &mut val_skipped,
    )?;
    skipped.extend(val_skipped);
    if !missing.is_empty() {
        return Err(Error::MissingData(format!(
            "{} cache entries missing: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    save_pairs(&train_pairs, cfg.pairs_path())?;
    save_pairs(&val_pairs, cfg.validation_pairs_path())?;
    Ok(PairsSummary {
        records: pool.len(),
        pairs: train_pairs.len(),
        validation_pairs: val_pairs.len(),
        skipped,
    })
}

/// Options specific to `train`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainArgs {
    /// Resumable checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this step and write a resumable checkpoint.
    pub pause_at: Option<u64>,
    /// Start from this base checkpoint instead of building and warming a fresh one.
    pub base: Option<PathBuf>,
}

/// Summary written beside the trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub steps: u64,
    pub best_step: u64,
    pub best_validation_loss: Option<f64>,
    pub stopped_early: bool,
    pub mu1: f64,
    pub mu2: f64,
    pub mu_updates: u64,
    pub train_examples: usize,
    /// Validation statistics of the returned (best) model.
    pub validation: ValStats,
    /// Mean validation `lpθ(chosen) − lpref(chosen)` of the returned model.
    pub delta_chosen: f64,
    pub delta_rejected: f64,
}

/// What `train` produced.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainResult {
    Finished(TrainSummary),
    Paused { step: u64, checkpoint: PathBuf },
}

fn train_data(cfg: &RunConfig) -> Result<(TrainData, TrainData, Vec<ClaimRecord>)> {
    let train_records = training_pool(cfg)?.0;
    if cfg.hyper.variant == Variant::LabelOnly {
        let val = load_split(cfg, Split::Validation)?;
        return Ok((
            TrainData::Targets(build_label_only_targets(&train_records)),
            TrainData::Targets(build_label_only_targets(&val)),
            train_records,
        ));
    }
    let (tp, vp) = (cfg.pairs_path(), cfg.validation_pairs_path());
    require(&tp, "pairs file")?;
    require(&vp, "validation pairs file")?;
    Ok((
        TrainData::Pairs(load_pairs(tp)?),
        TrainData::Pairs(load_pairs(vp)?),
        train_records,
    ))
}

/// Vocabulary from the training prompts and completions.
pub fn build_tokenizer(
    records: &[ClaimRecord],
    data: &TrainData,
    max_word_units: usize,
) -> Tokenizer {
    let mut texts: Vec<String> = records
        .iter()
        .map(|r| build_prompt(r, &PromptMode::Bare))
        .collect();
    match data {
        TrainData::Pairs(pairs) => {
            for p in pairs {
                texts.push(p.chosen.clone());
                texts.push(p.rejected.clone());
            }
        }
        TrainData::Targets(t) => texts.extend(t.iter().map(|t| t.target.clone())),
    }
    Tokenizer::build(texts.iter().map(String::as_str), max_word_units)
}

/// Trains the configured variant; writes `base.ckpt`, `model.ckpt`, `metrics.csv`, `trace.csv`
/// and `train_summary.json` to the output directory.
pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainResult> {
    ensure_out(cfg)?;
    let (train, val, records) = train_data(cfg)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            require(path, "resume checkpoint")?;
            Trainer::resume(path, &train, &val)?
        }
        None => {
            let model = match &args.base {
                Some(path) => {
                    require(path, "base checkpoint")?;
                    load_checkpoint(path)?.0
                }
                None => {
                    let tok = build_tokenizer(&records, &train, cfg.tokenizer.max_word_units);
                    let model_cfg = ModelConfig {
                        vocab_size: tok.vocab_size(),
                        ..cfg.model.clone()
                    };
                    let mut model = PolicyModel::new(
                        model_cfg,
                        cfg.adapter.clone(),
                        tok,
                        derive_seed(cfg.seed, "model"),
                    )?;
                    format_warmup(&mut model, &train, &cfg.warmup, cfg.seed)?;
                    model
                }
            };
            save_checkpoint(&model, cfg.out_file("base.ckpt"), None)?;
            let reference = clone_reference(&model);
            Trainer::new(
                model,
                &reference,
                &train,
                &val,
                cfg.hyper.clone(),
                cfg.trainer.clone(),
            )?
        }
    };
    if let Some(k) = args.pause_at {
        trainer.run_until(k)?;
        if !trainer.is_done() {
            let path = cfg.out_file("train.state.ckpt");
            trainer.save(&path)?;
            return Ok(TrainResult::Paused {
                step: trainer.state().step,
                checkpoint: path,
            });
        }
    }
    trainer.run()?;
    let variant = trainer.hyper().variant;
    let outcome = trainer.finish()?;
    let v = outcome.final_validation;
    let summary = TrainSummary {
        variant,
        steps: outcome.state.step,
        best_step: outcome.state.best_step,
        best_validation_loss: outcome.state.best_validation_loss,
        stopped_early: outcome.state.stopped_early,
        mu1: outcome.state.mu.mu1,
        mu2: outcome.state.mu.mu2,
        mu_updates: outcome.state.mu_updates,
        train_examples: train.len(),
        validation: v,
        delta_chosen: v.lp_theta_chosen - v.lp_ref_chosen,
        delta_rejected: v.lp_theta_rejected - v.lp_ref_rejected,
    };
    save_checkpoint(
        &outcome.model,
        cfg.out_file("model.ckpt"),
        Some(serde_json::to_value(&summary)?),
    )?;
    write_text(&cfg.out_file("metrics.csv"), &outcome.log.metrics_csv())?;
    write_text(&cfg.out_file("trace.csv"), &outcome.log.trace_csv())?;
    let mut js = serde_json::to_string_pretty(&summary)?;
    js.push('\n');
    write_text(&cfg.out_file("train_summary.json"), &js)?;
    Ok(TrainResult::Finished(summary))
}

fn write_report(
    cfg: &RunConfig,
    name: &str,
    report: &EvalReport,
    preds: &[Prediction],
) -> Result<()> {
    write_text(&cfg.out_file(&format!("{name}.json")), &report.to_json()?)?;
    write_text(
        &cfg.out_file(&format!("{name}_tags.csv")),
        &report.per_tag_csv(),
    )?;
    crate::claims::write_jsonl(preds, cfg.out_file(&format!("{name}_predictions.jsonl")))
}

fn load_model(cfg: &RunConfig) -> Result<PolicyModel> {
    let path = cfg.checkpoint_path();
    require(&path, "checkpoint")?;
    Ok(load_checkpoint(path)?.0)
}

/// Evaluates the checkpoint on the configured split; writes `{name}.json`, `{name}_tags.csv`
/// and `{name}_predictions.jsonl`.
pub fn cmd_eval(cfg: &RunConfig, name: &str) -> Result<EvalReport> {
    ensure_out(cfg)?;
    let model = load_model(cfg)?;
    let records = load_split(cfg, cfg.eval.split)?;
    let (report, preds) = evaluate(&model, &records, cfg.eval.max_new_tokens)?;
    write_report(cfg, name, &report, &preds)?;
    Ok(report)
}

/// Options specific to `cross-eval`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrossEvalArgs {
    pub foreign: PathBuf,
    pub train_corpus: Option<String>,
    pub eval_corpus: Option<String>,
}

fn stem(p: &Path) -> String {
    let p = p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Evaluates on a foreign corpus, refusing ids shared with the training or validation split.
pub fn cmd_cross_eval(cfg: &RunConfig, args: &CrossEvalArgs, name: &str) -> Result<EvalReport> {
    ensure_out(cfg)?;
    require(&args.foreign, "foreign corpus")?;
    let model = load_model(cfg)?;
    let (mut seen, _) = training_pool(cfg)?;
    seen.extend(load_split(cfg, Split::Validation)?);
    let foreign = load_claims(&args.foreign)?;
    let train_name = args
        .train_corpus
        .clone()
        .unwrap_or_else(|| stem(&cfg.claims_dir()));
    let eval_name = args
        .eval_corpus
        .clone()
        .unwrap_or_else(|| stem(&args.foreign));
    let (report, preds) = cross_eval(
        &model,
        seen.iter().map(|r| r.id.as_str()),
        &foreign,
        &train_name,
        &eval_name,
        cfg.eval.max_new_tokens,
    )?;
    write_report(cfg, name, &report, &preds)?;
    Ok(report)
}
