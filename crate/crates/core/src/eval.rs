//! Verdict prediction, accuracy and macro-F1 with a per-tag breakdown, and cross-corpus runs.
//!
//! Refutes is the positive class. An unparsed prediction is wrong for its gold class and
//! credited to neither class. A class with no gold records and no predictions is left out of
//! the macro average.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::claims::{ClaimRecord, Label};
use crate::error::{Error, Result};
use crate::policy::{sample_ids, PolicyModel};
use crate::prompting::{build_prompt, parse_label, PromptMode};

/// Default decode budget for predictions.
pub const DEFAULT_EVAL_TOKENS: usize = 64;

/// One model verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub label: Option<Label>,
    pub text: String,
}

/// Greedy decode from the bare prompt; a prompt that does not fit the context is unparsed.
pub fn predict(
    model: &PolicyModel,
    record: &ClaimRecord,
    max_new_tokens: usize,
) -> Result<Prediction> {
    let tok = model.tokenizer();
    let prompt = tok.encode(&build_prompt(record, &PromptMode::Bare));
    let room = model.config().context_len.saturating_sub(prompt.len() + 1);
    if room == 0 {
        return Ok(Prediction {
            record_id: record.id.clone(),
            label: None,
            text: String::new(),
        });
    }
    let ids = sample_ids(model, &prompt, max_new_tokens.min(room), 0.0, 0)?;
    let text = tok.decode(&ids);
    Ok(Prediction {
        record_id: record.id.clone(),
        label: parse_label(&text),
        text,
    })
}

/// Predictions in record order.
pub fn predict_all(
    model: &PolicyModel,
    records: &[ClaimRecord],
    max_new_tokens: usize,
) -> Result<Vec<Prediction>> {
    records
        .iter()
        .map(|r| predict(model, r, max_new_tokens))
        .collect()
}

/// 2×2 counts with Refutes as the positive class, plus unparsed counts per gold class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
    pub unparsed_refutes: usize,
    pub unparsed_supports: usize,
}

impl Confusion {
    pub fn add(&mut self, pred: Option<Label>, gold: Label) {
        match (pred, gold) {
            (Some(Label::Refutes), Label::Refutes) => self.tp += 1,
            (Some(Label::Supports), Label::Refutes) => self.fn_ += 1,
            (Some(Label::Refutes), Label::Supports) => self.fp += 1,
            (Some(Label::Supports), Label::Supports) => self.tn += 1,
            (None, Label::Refutes) => self.unparsed_refutes += 1,
            (None, Label::Supports) => self.unparsed_supports += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn + self.unparsed()
    }

    pub fn unparsed(&self) -> usize {
        self.unparsed_refutes + self.unparsed_supports
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => (self.tp + self.tn) as f64 / n as f64,
        }
    }

    /// Per-class F1 as `(positive, negative)`; `None` for a class that is absent from gold and predictions.
    pub fn class_f1(&self) -> (Option<f64>, Option<f64>) {
        let f1 = |tp: usize, fp: usize, fn_: usize| match 2 * tp + fp + fn_ {
            0 => None,
            d => Some(2.0 * tp as f64 / d as f64),
        };
        (
            f1(self.tp, self.fp, self.fn_ + self.unparsed_refutes),
            f1(self.tn, self.fn_, self.fp + self.unparsed_supports),
        )
    }

    pub fn macro_f1(&self) -> f64 {
        let present: Vec<f64> = [self.class_f1().0, self.class_f1().1]
            .into_iter()
            .flatten()
            .collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn scores(&self) -> Scores {
        Scores {
            accuracy: self.accuracy(),
            macro_f1: self.macro_f1(),
            count: self.total(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub count: usize,
}

/// Scores for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_corpus: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_corpus: Option<String>,
    pub overall: Scores,
    pub per_tag: BTreeMap<String, Scores>,
    pub confusion: Confusion,
    pub unparsed_count: usize,
}

impl EvalReport {
    /// Pretty JSON with a trailing newline; key order is fixed.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `tag,count,accuracy,macro_f1` rows, tags sorted.
    pub fn per_tag_csv(&self) -> String {
        let mut s = String::from("tag,count,accuracy,macro_f1\n");
        for (tag, sc) in &self.per_tag {
            let _ = writeln!(s, "{tag},{},{},{}", sc.count, sc.accuracy, sc.macro_f1);
        }
        s
    }
}

fn report_from(confusion: Confusion, per_tag: BTreeMap<String, Confusion>) -> EvalReport {
    EvalReport {
        train_corpus: None,
        eval_corpus: None,
        overall: confusion.scores(),
        per_tag: per_tag.into_iter().map(|(t, c)| (t, c.scores())).collect(),
        unparsed_count: confusion.unparsed(),
        confusion,
    }
}

/// Overall scores for aligned predictions and gold labels.
pub fn metrics(predictions: &[Option<Label>], golds: &[Label]) -> Result<EvalReport> {
    if predictions.len() != golds.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let mut c = Confusion::default();
    for (p, g) in predictions.iter().zip(golds) {
        c.add(*p, *g);
    }
    Ok(report_from(c, BTreeMap::new()))
}

/// Overall and per-tag scores; predictions are matched to records by id.
pub fn score(predictions: &[Prediction], records: &[ClaimRecord]) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &Prediction> = predictions
        .iter()
        .map(|p| (p.record_id.as_str(), p))
        .collect();
    if by_id.len() != records.len() || predictions.len() != records.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} records",
            predictions.len(),
            records.len()
        )));
    }
    let mut overall = Confusion::default();
    let mut per_tag: BTreeMap<String, Confusion> = BTreeMap::new();
    for r in records {
        let p = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::MissingData(format!("no prediction for record {:?}", r.id)))?;
        overall.add(p.label, r.label);
        let tags: BTreeSet<&String> = r.tags.iter().collect();
        for t in tags {
            per_tag.entry(t.clone()).or_default().add(p.label, r.label);
        }
    }
    Ok(report_from(overall, per_tag))
}

/// Predicts and scores a record set.
pub fn evaluate(
    model: &PolicyModel,
    records: &[ClaimRecord],
    max_new_tokens: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = predict_all(model, records, max_new_tokens)?;
    Ok((score(&preds, records)?, preds))
}

/// Fails when any foreign record id also appears in the training ids.
pub fn check_leakage<'a>(
    train_ids: impl IntoIterator<Item = &'a str>,
    foreign: &[ClaimRecord],
) -> Result<()> {
    let train: BTreeSet<&str> = train_ids.into_iter().collect();
    let overlap: Vec<&str> = foreign
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| train.contains(id))
        .collect();
    match overlap.first() {
        None => Ok(()),
        Some(first) => Err(Error::Leakage {
            count: overlap.len(),
            first: first.to_string(),
        }),
    }
}

/// Evaluates on a foreign corpus after checking it shares no ids with the training data.
pub fn cross_eval<'a>(
    model: &PolicyModel,
    train_ids: impl IntoIterator<Item = &'a str>,
    foreign: &[ClaimRecord],
    train_corpus: &str,
    eval_corpus: &str,
    max_new_tokens: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    check_leakage(train_ids, foreign)?;
    let (mut report, preds) = evaluate(model, foreign, max_new_tokens)?;
    report.train_corpus = Some(train_corpus.to_string());
    report.eval_corpus = Some(eval_corpus.to_string());
    Ok((report, preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_confusion() {
        let c = Confusion {
            tp: 3,
            fn_: 1,
            fp: 2,
            tn: 4,
            ..Confusion::default()
        };
        assert!((c.accuracy() - 0.7).abs() < 1e-12);
        let (p, n) = c.class_f1();
        assert!((p.unwrap() - 6.0 / 9.0).abs() < 1e-12);
        assert!((n.unwrap() - 8.0 / 11.0).abs() < 1e-12);
        assert!((c.macro_f1() - 0.69697).abs() < 1e-5);
    }

    #[test]
    fn unparsed_counts_as_wrong() {
        let r = metrics(&[None, None], &[Label::Refutes, Label::Supports]).unwrap();
        assert_eq!(r.overall.accuracy, 0.0);
        assert_eq!(r.overall.macro_f1, 0.0);
        assert_eq!(r.unparsed_count, 2);
        let ok = metrics(&[Some(Label::Supports)], &[Label::Supports]).unwrap();
        assert_eq!((ok.overall.accuracy, ok.overall.macro_f1), (1.0, 1.0));
        assert!(metrics(&[None], &[]).is_err());
    }
}
