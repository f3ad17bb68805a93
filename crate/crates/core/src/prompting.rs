//! Prompt template, completion rendering and answer parsing.

use crate::claims::{ClaimRecord, Label};
use crate::error::{Error, Result};

pub const CLAIM_PREFIX: &str = "CLAIM: ";
pub const EVIDENCE_HEADER: &str = "EVIDENCE:\n";
pub const EVIDENCE_BULLET: &str = "- ";
pub const TIPS_PREFIX: &str = "TIPS: ";
pub const QUESTION_LINE: &str =
    "QUESTION: Does the Evidence contradict the CLAIM? Answer \"Yes\" or \"No\", then explain your reasoning.\n";
pub const HINT_PREFIX: &str = "The correct answer is: ";
pub const ANSWER_LINE: &str = "ANSWER:\n";

/// Characters inspected by [`parse_label`].
pub const PARSE_WINDOW: usize = 16;

/// Non-empty tips text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tips(String);

impl Tips {
    pub fn new(text: impl Into<String>) -> Result<Tips> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::Precondition("tips text must be non-empty".into()));
        }
        Ok(Tips(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Which optional lines the prompt carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptMode {
    Bare,
    WithLabel(Label),
    WithLabelAndTips(Label, Tips),
}

impl PromptMode {
    /// Tips mode sourced from the record's own tips.
    pub fn tips_from(record: &ClaimRecord, label: Label) -> Result<PromptMode> {
        let tips = record
            .tips
            .clone()
            .ok_or_else(|| Error::Precondition(format!("record {:?} has no tips", record.id)))?;
        Ok(PromptMode::WithLabelAndTips(label, Tips::new(tips)?))
    }
}

/// Instantiates the canonical prompt template.
pub fn build_prompt(record: &ClaimRecord, mode: &PromptMode) -> String {
    let mut out = String::with_capacity(256);
    out.push_str(CLAIM_PREFIX);
    out.push_str(&record.claim);
    out.push('\n');
    out.push_str(EVIDENCE_HEADER);
    for ev in &record.evidence {
        out.push_str(EVIDENCE_BULLET);
        out.push_str(ev);
        out.push('\n');
    }
    if let PromptMode::WithLabelAndTips(_, tips) = mode {
        out.push_str(TIPS_PREFIX);
        out.push_str(tips.as_str());
        out.push('\n');
    }
    out.push_str(QUESTION_LINE);
    match mode {
        PromptMode::Bare => {}
        PromptMode::WithLabel(label) | PromptMode::WithLabelAndTips(label, _) => {
            out.push_str(HINT_PREFIX);
            out.push_str(label.answer_token());
            out.push_str(".\n");
        }
    }
    out.push_str(ANSWER_LINE);
    out
}

/// Joins an answer token and an explanation: `"Yes, <explanation>"`.
pub fn render_completion(label: Label, explanation: &str) -> Result<String> {
    if explanation.is_empty() {
        return Err(Error::Precondition("explanation must be non-empty".into()));
    }
    Ok(format!("{}, {}", label.answer_token(), explanation))
}

/// Byte span of the leading standalone yes/no word, if any.
fn leading_answer(text: &str) -> Option<(Label, usize, usize)> {
    let mut start = None;
    for (n, (i, c)) in text.char_indices().enumerate() {
        if n >= PARSE_WINDOW {
            return None;
        }
        if c.is_alphanumeric() {
            start = Some((n, i));
            break;
        }
        if !(c.is_whitespace() || c.is_ascii_punctuation()) {
            return None;
        }
    }
    let (n0, s) = start?;
    let word_end = text[s..]
        .char_indices()
        .find(|(_, c)| !c.is_alphanumeric())
        .map_or(text.len(), |(j, _)| s + j);
    let word = &text[s..word_end];
    if n0 + word.chars().count() > PARSE_WINDOW {
        return None;
    }
    Label::from_answer_token(word).map(|l| (l, s, word_end))
}

/// Reads the verdict from a leading "yes"/"no" within the first few characters.
pub fn parse_label(text: &str) -> Option<Label> {
    leading_answer(text).map(|(l, _, _)| l)
}

/// The explanation following the leading answer token and its separator.
pub fn explanation_body(text: &str) -> Option<&str> {
    let (_, _, end) = leading_answer(text)?;
    let rest = text[end..]
        .trim_start_matches(|c: char| c == ',' || c == '.' || c == ':' || c.is_whitespace());
    if rest.is_empty() {
        None
    } else {
        Some(rest)
    }
}
