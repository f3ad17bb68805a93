//! Claim records, verdict labels and the line-delimited claims file.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Gold verdict of a claim against its evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Supports,
    Refutes,
}

impl Label {
    /// Answer token for the contradiction question: "Yes" means the evidence refutes the claim.
    pub fn answer_token(self) -> &'static str {
        match self {
            Label::Supports => "No",
            Label::Refutes => "Yes",
        }
    }

    /// Inverse of [`Label::answer_token`], case-insensitive.
    pub fn from_answer_token(token: &str) -> Option<Label> {
        if token.eq_ignore_ascii_case("yes") {
            Some(Label::Refutes)
        } else if token.eq_ignore_ascii_case("no") {
            Some(Label::Supports)
        } else {
            None
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Supports => Label::Refutes,
            Label::Refutes => Label::Supports,
        }
    }
}

/// Dataset split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One claim with its evidence sentences and gold verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub id: String,
    pub claim: String,
    pub evidence: Vec<String>,
    pub label: Label,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub counterfactual: bool,
    #[serde(default)]
    pub tips: Option<String>,
    #[serde(default)]
    pub split: Split,
    /// Fields not understood by this crate, kept verbatim.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ClaimRecord {
    pub fn new(
        id: impl Into<String>,
        claim: impl Into<String>,
        evidence: Vec<String>,
        label: Label,
    ) -> Self {
        ClaimRecord {
            id: id.into(),
            claim: claim.into(),
            evidence,
            label,
            tags: Vec::new(),
            counterfactual: false,
            tips: None,
            split: Split::Train,
            extra: Map::new(),
        }
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| {
            Err(Error::InvalidRecord {
                id: self.id.clone(),
                message: message.to_string(),
            })
        };
        if self.id.is_empty() {
            return bad("field `id` is empty");
        }
        if self.evidence.is_empty() {
            return bad("field `evidence` is empty");
        }
        if self.tips.is_some() && !self.counterfactual {
            return bad("field `tips` is set but `counterfactual` is false");
        }
        Ok(())
    }

    /// True when the tips-conditioned generation setting applies to this record.
    pub fn tips_eligible(&self) -> bool {
        self.counterfactual
            && self.label == Label::Refutes
            && self.tips.as_deref().is_some_and(|t| !t.is_empty())
    }
}

/// Reads a claims file, validating every record and rejecting duplicate ids.
pub fn load_claims(path: impl AsRef<Path>) -> Result<Vec<ClaimRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let record: ClaimRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records one per line.
pub fn save_claims(records: &[ClaimRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(records, path)
}

pub(crate) fn write_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_tokens_are_a_bijection() {
        for label in [Label::Supports, Label::Refutes] {
            assert_eq!(Label::from_answer_token(label.answer_token()), Some(label));
        }
        assert_ne!(
            Label::Supports.answer_token(),
            Label::Refutes.answer_token()
        );
    }

    #[test]
    fn tips_require_counterfactual() {
        let mut r = ClaimRecord::new("a", "c", vec!["e".into()], Label::Refutes);
        r.tips = Some("x".into());
        assert!(r.validate().is_err());
        r.counterfactual = true;
        assert!(r.validate().is_ok());
    }

    #[test]
    fn split_defaults_to_train_and_unknown_fields_survive() {
        let line =
            r#"{"id":"a","claim":"c","evidence":["e"],"label":"refutes","source":{"page":3}}"#;
        let r: ClaimRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.split, Split::Train);
        assert_eq!(r.extra["source"]["page"], 3);
        let back = serde_json::to_string(&r).unwrap();
        assert!(back.contains(r#""source":{"page":3}"#));
    }
}
