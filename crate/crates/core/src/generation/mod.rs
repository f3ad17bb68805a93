//! Self-instruction settings run against a pluggable text generator.

mod cache;
mod endpoint;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::claims::{ClaimRecord, Label};
use crate::error::{Error, Result};
use crate::prompting::{build_prompt, parse_label, PromptMode};

pub use cache::GenerationCache;
pub use endpoint::EndpointGenerator;
pub use mock::{mock_generate, MockGenerator, MockProfile};

/// The four generation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SettingId {
    /// Bare prediction.
    S1BarePredict = 1,
    /// Explanation given the answer "Yes".
    S2GivenYes = 2,
    /// Explanation given the answer "No".
    S3GivenNo = 3,
    /// Explanation given "Yes" plus the edit tips.
    S4GivenTips = 4,
}

impl SettingId {
    pub const ALL: [SettingId; 4] = [
        SettingId::S1BarePredict,
        SettingId::S2GivenYes,
        SettingId::S3GivenNo,
        SettingId::S4GivenTips,
    ];

    /// Label the setting conditions on, if any.
    pub fn conditioned_label(self) -> Option<Label> {
        match self {
            SettingId::S1BarePredict => None,
            SettingId::S2GivenYes | SettingId::S4GivenTips => Some(Label::Refutes),
            SettingId::S3GivenNo => Some(Label::Supports),
        }
    }

    /// Validity of one output given its parsed label.
    pub fn is_valid(self, parsed: Option<Label>) -> bool {
        match self.conditioned_label() {
            None => parsed.is_some(),
            Some(l) => parsed == Some(l),
        }
    }

    pub fn applicable(self, record: &ClaimRecord) -> bool {
        self != SettingId::S4GivenTips || record.tips_eligible()
    }

    /// Prompt used for this setting.
    pub fn prompt(self, record: &ClaimRecord) -> Result<String> {
        let mode = match self {
            SettingId::S1BarePredict => PromptMode::Bare,
            SettingId::S2GivenYes => PromptMode::WithLabel(Label::Refutes),
            SettingId::S3GivenNo => PromptMode::WithLabel(Label::Supports),
            SettingId::S4GivenTips => {
                if !record.tips_eligible() {
                    return Err(Error::Precondition(format!(
                        "setting 4 needs a counterfactual refutes record with tips; {:?} is not one",
                        record.id
                    )));
                }
                PromptMode::tips_from(record, Label::Refutes)?
            }
        };
        Ok(build_prompt(record, &mode))
    }
}

impl From<SettingId> for u8 {
    fn from(s: SettingId) -> u8 {
        s as u8
    }
}

impl TryFrom<u8> for SettingId {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        SettingId::ALL
            .into_iter()
            .find(|s| *s as u8 == v)
            .ok_or_else(|| format!("setting must be 1..=4, got {v}"))
    }
}

/// Serde adapter writing labels as the lowercase answer tokens.
mod answer_label {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::claims::Label;

    pub fn serialize<S: Serializer>(v: &Option<Label>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(Label::Refutes) => s.serialize_str("yes"),
            Some(Label::Supports) => s.serialize_str("no"),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Label>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        match raw.as_deref() {
            None => Ok(None),
            Some("yes") => Ok(Some(Label::Refutes)),
            Some("no") => Ok(Some(Label::Supports)),
            Some(other) => Err(serde::de::Error::custom(format!(
                "parsed_label must be yes/no/null, got {other:?}"
            ))),
        }
    }
}

/// One sampled output under one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedExplanation {
    pub record_id: String,
    pub setting: SettingId,
    pub sample_index: usize,
    pub text: String,
    #[serde(with = "answer_label")]
    pub parsed_label: Option<Label>,
    pub valid: bool,
}

impl GeneratedExplanation {
    pub fn new(record_id: &str, setting: SettingId, sample_index: usize, text: String) -> Self {
        let parsed_label = parse_label(&text);
        GeneratedExplanation {
            record_id: record_id.to_string(),
            setting,
            sample_index,
            valid: setting.is_valid(parsed_label),
            text,
            parsed_label,
        }
    }
}

/// Generator backend selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Mock,
    Endpoint,
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub backend: Backend,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub request_parallelism: usize,
    pub retry_limit: u32,
    pub seed: u64,
    pub mock: MockProfile,
    /// Drop label-conditioned outputs whose answer contradicts the condition.
    pub validity_filter: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            backend: Backend::Mock,
            endpoint_url: None,
            model_name: None,
            temperature: 0.8,
            max_new_tokens: 512,
            request_parallelism: 1,
            retry_limit: 3,
            seed: 0,
            mock: MockProfile::default(),
            validity_filter: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backend == Backend::Endpoint && self.endpoint_url.is_none() {
            return Err(Error::Config(
                "endpoint backend requires endpoint_url".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.request_parallelism == 0 || self.max_new_tokens == 0 {
            return Err(Error::Config(
                "request_parallelism and max_new_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Builds the configured backend.
    pub fn build(&self) -> Result<Box<dyn Generator>> {
        self.validate()?;
        Ok(match self.backend {
            Backend::Mock => Box::new(MockGenerator::new(
                self.mock.clone(),
                self.seed,
                self.max_new_tokens,
            )),
            Backend::Endpoint => Box::new(EndpointGenerator::new(self)?),
        })
    }
}

/// A text generator returning `n` samples for one prompt.
pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str, n: usize) -> Result<Vec<String>>;

    /// Number of backend requests issued so far.
    fn calls(&self) -> usize;
}

/// Generates `n` texts for `prompt` with the configured backend.
pub fn generate(prompt: &str, n: usize, config: &GeneratorConfig) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::Precondition("n must be >= 1".into()));
    }
    config.build()?.generate(prompt, n)
}

/// Runs one setting on one record, returning `num_generations` parsed outputs.
pub fn run_setting(
    record: &ClaimRecord,
    setting: SettingId,
    generator: &dyn Generator,
    num_generations: usize,
) -> Result<Vec<GeneratedExplanation>> {
    let prompt = setting.prompt(record)?;
    let texts = generator.generate(&prompt, num_generations)?;
    if texts.len() != num_generations {
        return Err(Error::Backend {
            status: None,
            message: format!("expected {num_generations} samples, got {}", texts.len()),
        });
    }
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| GeneratedExplanation::new(&record.id, setting, i, t))
        .collect())
}

/// As [`run_setting`], answering from `cache` when all samples are present.
pub fn run_setting_cached(
    record: &ClaimRecord,
    setting: SettingId,
    generator: &dyn Generator,
    num_generations: usize,
    cache: &mut GenerationCache,
) -> Result<Vec<GeneratedExplanation>> {
    if let Some(hit) = cache.lookup(&record.id, setting, num_generations) {
        return Ok(hit);
    }
    let fresh = run_setting(record, setting, generator, num_generations)?;
    cache.insert_all(fresh.iter().cloned());
    Ok(fresh)
}

/// Request counter shared by the backends.
#[derive(Debug, Default)]
pub(crate) struct CallCounter(AtomicUsize);

impl CallCounter {
    pub(crate) fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}
