//! Evaluation: decoding ignores gold labels, scoring, and the leakage guard.

mod common;

use factdpo::eval::{check_leakage, evaluate, metrics, predict_all, score, Prediction};
use factdpo::{ClaimRecord, Error, Label};

fn records() -> Vec<ClaimRecord> {
    let mut a = ClaimRecord::new(
        "a",
        "Alice's city is Paris.",
        vec!["Alice's city is Rome.".into()],
        Label::Refutes,
    );
    a.tags = vec!["city".into()];
    let mut b = ClaimRecord::new(
        "b",
        "Bruno's age is 31.",
        vec!["Bruno's age is 31.".into()],
        Label::Supports,
    );
    b.tags = vec!["age".into()];
    vec![a, b]
}

#[test]
fn predictions_do_not_depend_on_gold_labels() {
    let model = common::small_policy(4);
    let recs = records();
    let flipped: Vec<ClaimRecord> = recs
        .iter()
        .cloned()
        .map(|mut r| {
            r.label = r.label.opposite();
            r
        })
        .collect();
    assert_eq!(
        predict_all(&model, &recs, 6).unwrap(),
        predict_all(&model, &flipped, 6).unwrap()
    );
    let (report, preds) = evaluate(&model, &recs, 6).unwrap();
    assert_eq!(report.overall.count, 2);
    assert_eq!(preds.len(), 2);
}

#[test]
fn scoring_matches_by_id_and_groups_by_tag() {
    let recs = records();
    let preds = vec![
        Prediction {
            record_id: "b".into(),
            label: Some(Label::Supports),
            text: "No, same.".into(),
        },
        Prediction {
            record_id: "a".into(),
            label: None,
            text: "???".into(),
        },
    ];
    let r = score(&preds, &recs).unwrap();
    assert_eq!(r.overall.accuracy, 0.5);
    assert_eq!(r.unparsed_count, 1);
    assert_eq!(r.per_tag["age"].accuracy, 1.0);
    assert_eq!(r.per_tag["city"].accuracy, 0.0);
    assert!(r.per_tag_csv().starts_with("tag,count,accuracy,macro_f1\n"));
}

#[test]
fn worked_confusion_example() {
    // TP 3, FN 1, FP 2, TN 4 with refutes as the positive class.
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for (p, g, n) in [
        (Label::Refutes, Label::Refutes, 3),
        (Label::Supports, Label::Refutes, 1),
        (Label::Refutes, Label::Supports, 2),
        (Label::Supports, Label::Supports, 4),
    ] {
        for _ in 0..n {
            preds.push(Some(p));
            golds.push(g);
        }
    }
    let r = metrics(&preds, &golds).unwrap();
    assert!((r.overall.accuracy - 0.7).abs() < 1e-12);
    // F1 refutes = 6/9, F1 supports = 8/11.
    assert!((r.overall.macro_f1 - (6.0 / 9.0 + 8.0 / 11.0) / 2.0).abs() < 1e-12);
    assert!(metrics(&preds[..3], &golds).is_err());
}

#[test]
fn leakage_guard_reports_shared_ids() {
    let recs = records();
    assert!(check_leakage(["x", "y"], &recs).is_ok());
    match check_leakage(["x", "b"], &recs) {
        Err(Error::Leakage { count: 1, first }) => assert_eq!(first, "b"),
        other => panic!("unexpected {other:?}"),
    }
}
