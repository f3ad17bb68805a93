//! Difficulty-weighted preference-pair construction and related datasets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::claims::{load_claims, read_jsonl, write_jsonl, ClaimRecord, Label};
use crate::config::Hyperparams;
use crate::error::{Error, Result};
use crate::generation::{GeneratedExplanation, SettingId};
use crate::prompting::{
    build_prompt, explanation_body, parse_label, render_completion, PromptMode,
};
use crate::util::derive_seed;

/// Per-record difficulty summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyStats {
    pub record_id: String,
    pub w: usize,
    pub k: usize,
    pub n_sample: usize,
}

/// A shared prompt with a preferred and a dispreferred completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub record_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub w: usize,
    pub k: usize,
    pub chosen_setting: SettingId,
    pub rejected_setting: SettingId,
}

impl PreferencePair {
    /// Builds a pair, enforcing polarity on both the rendered completions and their sources.
    pub fn new(
        record: &ClaimRecord,
        chosen_src: &GeneratedExplanation,
        rejected_src: &GeneratedExplanation,
        w: usize,
        k: usize,
    ) -> Result<Self> {
        let gold = record.label;
        let side = |src: &GeneratedExplanation, label: Label| -> Result<String> {
            if let Some(found) = src.parsed_label {
                if found != label {
                    return Err(Error::InvalidRecord {
                        id: record.id.clone(),
                        message: format!(
                            "setting {} sample {} answers {:?} but is used for {:?}",
                            src.setting as u8, src.sample_index, found, label
                        ),
                    });
                }
            }
            let body = explanation_body(&src.text).unwrap_or(src.text.as_str());
            render_completion(label, body)
        };
        let chosen = side(chosen_src, gold)?;
        let rejected = side(rejected_src, gold.opposite())?;
        if parse_label(&chosen) != Some(gold) || parse_label(&rejected) != Some(gold.opposite()) {
            return Err(Error::InvalidRecord {
                id: record.id.clone(),
                message: "pair polarity check failed".into(),
            });
        }
        Ok(PreferencePair {
            record_id: record.id.clone(),
            prompt: build_prompt(record, &PromptMode::Bare),
            chosen,
            rejected,
            w,
            k,
            chosen_setting: chosen_src.setting,
            rejected_setting: rejected_src.setting,
        })
    }
}

/// Switches for pair construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairOptions {
    /// Every record contributes exactly `n_min` pairs.
    pub flat_sampling: bool,
    /// Use `k - w` in place of `w` when sizing a record's share.
    pub invert_difficulty: bool,
    /// Leave counterfactual records and the tips setting out entirely.
    pub exclude_counterfactual: bool,
    /// Use only outputs whose answer agrees with their setting.
    pub validity_filter: bool,
    /// Fixed number of pairs per record, overriding the difficulty rule.
    pub fixed_count: Option<usize>,
}

impl Default for PairOptions {
    fn default() -> Self {
        PairOptions {
            flat_sampling: false,
            invert_difficulty: false,
            exclude_counterfactual: false,
            validity_filter: true,
            fixed_count: None,
        }
    }
}

/// Number of bare-setting outputs that state the gold verdict.
pub fn difficulty_weight(s1_results: &[GeneratedExplanation], gold: Label) -> Result<usize> {
    if s1_results.is_empty() {
        return Err(Error::Precondition(
            "difficulty weight needs at least one result".into(),
        ));
    }
    Ok(s1_results
        .iter()
        .filter(|g| g.parsed_label == Some(gold))
        .count())
}

/// `max(n_min, ceil(n_base * w / k))`.
pub fn sample_count(w: usize, k: usize, n_min: usize, n_base: usize) -> Result<usize> {
    if k == 0 || n_min == 0 || n_base == 0 {
        return Err(Error::Precondition(
            "k, n_min and n_base must be >= 1".into(),
        ));
    }
    if w > k {
        return Err(Error::Precondition(format!("w = {w} exceeds k = {k}")));
    }
    Ok(n_min.max((n_base * w).div_ceil(k)))
}

fn pool(results: &[GeneratedExplanation], filter: bool) -> Vec<&GeneratedExplanation> {
    results.iter().filter(|g| !filter || g.valid).collect()
}

/// Number of pairs a record contributes under the given options.
pub fn pairs_for_record(
    w: usize,
    k: usize,
    hyper: &Hyperparams,
    opts: &PairOptions,
) -> Result<usize> {
    if let Some(n) = opts.fixed_count {
        return Ok(n);
    }
    if opts.flat_sampling {
        return Ok(hyper.n_min);
    }
    let w_eff = if opts.invert_difficulty {
        k.saturating_sub(w)
    } else {
        w
    };
    sample_count(w_eff, k, hyper.n_min, hyper.n_base)
}

/// Pairs for one record, sampled with replacement from the label-conditioned pools.
#[allow(clippy::too_many_arguments)]
pub fn build_pairs(
    record: &ClaimRecord,
    s2: &[GeneratedExplanation],
    s3: &[GeneratedExplanation],
    s4: &[GeneratedExplanation],
    w: usize,
    k: usize,
    hyper: &Hyperparams,
    opts: &PairOptions,
) -> Result<Vec<PreferencePair>> {
    let n = pairs_for_record(w, k, hyper, opts)?;
    let yes_pool = pool(s2, opts.validity_filter);
    let no_pool = pool(s3, opts.validity_filter);
    let tips_pool = pool(s4, opts.validity_filter);
    let use_tips = !opts.exclude_counterfactual
        && record.counterfactual
        && record.label == Label::Refutes
        && !tips_pool.is_empty();
    let (gold_pool, other_pool) = match record.label {
        Label::Refutes if use_tips => (&tips_pool, &no_pool),
        Label::Refutes => (&yes_pool, &no_pool),
        Label::Supports => (&no_pool, &yes_pool),
    };
    if gold_pool.is_empty() || other_pool.is_empty() {
        return Err(Error::MissingData(format!(
            "record {:?}: empty {} pool",
            record.id,
            if gold_pool.is_empty() {
                "chosen"
            } else {
                "rejected"
            }
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, &record.id));
    (0..n)
        .map(|_| {
            let c = gold_pool[rng.random_range(0..gold_pool.len())];
            let r = other_pool[rng.random_range(0..other_pool.len())];
            PreferencePair::new(record, c, r, w, k)
        })
        .collect()
}

/// Records loaded from a counterfactual file, plus warnings about them.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<ClaimRecord>,
    pub warnings: Vec<String>,
}

/// Loads counterfactual records; ones without tips are kept but never reach the tips setting.
pub fn ingest_counterfactual(path: impl AsRef<Path>) -> Result<Ingested> {
    let mut out = Ingested {
        records: load_claims(path)?,
        warnings: Vec::new(),
    };
    for r in &mut out.records {
        if !r.counterfactual {
            out.warnings.push(format!(
                "{}: not flagged counterfactual; flag set on ingest",
                r.id
            ));
            r.counterfactual = true;
        }
        if r.tips.as_deref().is_none_or(str::is_empty) {
            out.warnings.push(format!(
                "{}: counterfactual record without tips; tips setting disabled",
                r.id
            ));
        }
    }
    Ok(out)
}

/// Merges ingested counterfactual records into a training pool unless excluded.
pub fn merge_counterfactual(pool: &mut Vec<ClaimRecord>, ingested: Ingested, exclude: bool) {
    if !exclude {
        pool.extend(ingested.records);
    }
}

/// Bare prompt paired with the single answer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTarget {
    pub record_id: String,
    pub prompt: String,
    pub target: String,
}

/// One answer-token target per record.
pub fn build_label_only_targets(records: &[ClaimRecord]) -> Vec<LabelTarget> {
    records
        .iter()
        .map(|r| LabelTarget {
            record_id: r.id.clone(),
            prompt: build_prompt(r, &PromptMode::Bare),
            target: r.label.answer_token().to_string(),
        })
        .collect()
}

pub fn save_pairs(pairs: &[PreferencePair], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(pairs, path)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    read_jsonl(path)
}
