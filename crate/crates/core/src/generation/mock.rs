//! Deterministic stand-in for a language-model generator.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CallCounter, Generator};
use crate::claims::Label;
use crate::error::Result;
use crate::prompting::{CLAIM_PREFIX, EVIDENCE_BULLET, HINT_PREFIX, TIPS_PREFIX};
use crate::util::fnv1a;

/// Behaviour of the mock generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockProfile {
    /// Probability of the gold-consistent answer on a bare prompt.
    pub p: f64,
    /// Probability of following a label hint when one is present.
    pub q_follow: f64,
}

impl Default for MockProfile {
    fn default() -> Self {
        MockProfile {
            p: 0.7,
            q_follow: 0.95,
        }
    }
}

const OPENERS: [&str; 5] = ["", "clearly ", "here ", "in short ", "overall "];

const YES_BODIES: [&str; 4] = [
    "the evidence contradicts the claim about {F}.",
    "the claim about {F} is not what the evidence says.",
    "according to the evidence {F} is wrong.",
    "the evidence gives a different fact than the claim about {F}.",
];

const NO_BODIES: [&str; 4] = [
    "the evidence supports the claim about {F}.",
    "the evidence agrees that {F} is right.",
    "according to the evidence the claim about {F} holds.",
    "the evidence states the same fact about {F}.",
];

const TIPS_BODIES: [&str; 2] = [
    "{T}, so the claim about {F} is wrong.",
    "the claim is wrong because {T}.",
];

struct ParsedPrompt<'a> {
    claim: &'a str,
    evidence: Vec<&'a str>,
    tips: Option<&'a str>,
    hint: Option<Label>,
}

fn parse_prompt(prompt: &str) -> ParsedPrompt<'_> {
    let mut parsed = ParsedPrompt {
        claim: "",
        evidence: Vec::new(),
        tips: None,
        hint: None,
    };
    for line in prompt.lines() {
        if let Some(c) = line.strip_prefix(CLAIM_PREFIX) {
            parsed.claim = c;
        } else if let Some(e) = line.strip_prefix(EVIDENCE_BULLET) {
            parsed.evidence.push(e);
        } else if let Some(t) = line.strip_prefix(TIPS_PREFIX) {
            parsed.tips = Some(t);
        } else if let Some(h) = line.strip_prefix(HINT_PREFIX) {
            parsed.hint = Label::from_answer_token(h.trim_end_matches('.'));
        }
    }
    parsed
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// The mock's own verdict: a claim is refuted when it mentions a word the evidence lacks.
fn mock_verdict(claim: &str, evidence: &[&str]) -> Label {
    let known: HashSet<String> = evidence.iter().flat_map(|e| words(e)).collect();
    if words(claim).all(|w| known.contains(&w)) {
        Label::Supports
    } else {
        Label::Refutes
    }
}

fn rng_for(prompt: &str, seed: u64, sample_index: usize) -> ChaCha8Rng {
    let mixed = fnv1a(prompt.as_bytes())
        ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (sample_index as u64 + 1).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn truncate_chars(text: &mut String, max_chars: usize) {
    if let Some((cut, _)) = text.char_indices().nth(max_chars) {
        text.truncate(cut);
    }
}

/// One mock sample, a pure function of its arguments.
pub fn mock_generate(
    prompt: &str,
    seed: u64,
    sample_index: usize,
    profile: &MockProfile,
) -> String {
    let parsed = parse_prompt(prompt);
    let mut rng = rng_for(prompt, seed, sample_index);
    let label = match parsed.hint {
        Some(hint) => {
            if rng.random::<f64>() < profile.q_follow {
                hint
            } else {
                hint.opposite()
            }
        }
        None => {
            let gold = mock_verdict(parsed.claim, &parsed.evidence);
            if rng.random::<f64>() < profile.p {
                gold
            } else {
                gold.opposite()
            }
        }
    };
    let fragments: Vec<&str> = parsed
        .claim
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|w| !w.is_empty())
        .collect();
    let fragment = if fragments.is_empty() {
        "it"
    } else {
        fragments[rng.random_range(0..fragments.len())]
    };
    let opener = OPENERS[rng.random_range(0..OPENERS.len())];
    let body = match (label, parsed.tips) {
        (Label::Refutes, Some(tips)) => {
            let t = TIPS_BODIES[rng.random_range(0..TIPS_BODIES.len())];
            t.replace("{T}", tips).replace("{F}", fragment)
        }
        (Label::Refutes, None) => {
            YES_BODIES[rng.random_range(0..YES_BODIES.len())].replace("{F}", fragment)
        }
        (Label::Supports, _) => {
            NO_BODIES[rng.random_range(0..NO_BODIES.len())].replace("{F}", fragment)
        }
    };
    format!("{}, {}{}", label.answer_token(), opener, body)
}

/// Generator backed by [`mock_generate`].
#[derive(Debug)]
pub struct MockGenerator {
    profile: MockProfile,
    seed: u64,
    max_new_tokens: usize,
    calls: CallCounter,
}

impl MockGenerator {
    pub fn new(profile: MockProfile, seed: u64, max_new_tokens: usize) -> Self {
        MockGenerator {
            profile,
            seed,
            max_new_tokens,
            calls: CallCounter::default(),
        }
    }
}

impl Generator for MockGenerator {
    fn generate(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        self.calls.bump();
        Ok((0..n)
            .map(|i| {
                // Every token spans at least one character, so a character cap bounds the token count.
                let mut text = mock_generate(prompt, self.seed, i, &self.profile);
                truncate_chars(&mut text, self.max_new_tokens);
                text
            })
            .collect())
    }

    fn calls(&self) -> usize {
        self.calls.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::ClaimRecord;
    use crate::prompting::{build_prompt, parse_label, PromptMode};

    fn refutes_record() -> ClaimRecord {
        ClaimRecord::new(
            "r",
            "Alice's city is Paris.",
            vec![
                "Alice's city is Rome.".into(),
                "Bruno's job is baker.".into(),
            ],
            Label::Refutes,
        )
    }

    #[test]
    fn verdict_heuristic() {
        let r = refutes_record();
        let ev: Vec<&str> = r.evidence.iter().map(String::as_str).collect();
        assert_eq!(mock_verdict(&r.claim, &ev), Label::Refutes);
        assert_eq!(mock_verdict("Alice's city is Rome.", &ev), Label::Supports);
    }

    #[test]
    fn follows_hint_and_respects_p() {
        let r = refutes_record();
        let hinted = build_prompt(&r, &PromptMode::WithLabel(Label::Refutes));
        let always = MockProfile {
            p: 0.0,
            q_follow: 1.0,
        };
        let bare = build_prompt(&r, &PromptMode::Bare);
        for i in 0..50 {
            assert!(mock_generate(&hinted, 1, i, &always).starts_with("Yes,"));
            assert_eq!(
                parse_label(&mock_generate(&bare, 1, i, &always)),
                Some(Label::Supports)
            );
        }
    }

    #[test]
    fn truncation_is_char_safe() {
        let mut s = "héllo".to_string();
        truncate_chars(&mut s, 2);
        assert_eq!(s, "hé");
    }
}
