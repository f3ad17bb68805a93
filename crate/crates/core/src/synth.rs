//! Templated claim/evidence corpus for desk-scale runs.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::claims::{ClaimRecord, Label, Split};

const NAMES: [&str; 16] = [
    "Alice", "Bruno", "Carla", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas",
    "Kira", "Liam", "Mona", "Nils", "Olga", "Pavel",
];
const CITIES: [&str; 8] = [
    "Paris", "Rome", "Oslo", "Lima", "Cairo", "Seoul", "Quito", "Dakar",
];
const JOBS: [&str; 8] = [
    "baker", "pilot", "nurse", "judge", "miner", "tailor", "farmer", "singer",
];
const AGE_MIN: u32 = 20;
const AGE_MAX: u32 = 59;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    City,
    Job,
    Age,
}

impl Relation {
    const ALL: [Relation; 3] = [Relation::City, Relation::Job, Relation::Age];

    fn name(self) -> &'static str {
        match self {
            Relation::City => "city",
            Relation::Job => "job",
            Relation::Age => "age",
        }
    }

    fn random_value(self, rng: &mut ChaCha8Rng) -> String {
        match self {
            Relation::City => CITIES.choose(rng).unwrap().to_string(),
            Relation::Job => JOBS.choose(rng).unwrap().to_string(),
            Relation::Age => rng.random_range(AGE_MIN..=AGE_MAX).to_string(),
        }
    }
}

fn sentence(name: &str, rel: Relation, value: &str) -> String {
    format!("{name}'s {} is {value}.", rel.name())
}

fn mentions(evidence: &[String], value: &str) -> bool {
    evidence
        .iter()
        .any(|e| e.split(|c: char| !c.is_alphanumeric()).any(|w| w == value))
}

/// Corpus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub size: usize,
    pub seed: u64,
    pub contradiction_rate: f64,
    /// Evidence sentences about other people added after the relevant one.
    pub distractors: usize,
    /// Shuffle evidence order so the relevant sentence moves around.
    pub shuffle_evidence: bool,
}

impl SynthOptions {
    pub fn new(size: usize, seed: u64, contradiction_rate: f64) -> Self {
        SynthOptions {
            size,
            seed,
            contradiction_rate,
            distractors: 1,
            shuffle_evidence: false,
        }
    }
}

/// Default-shaped corpus: one distractor, relevant evidence first.
pub fn synthesize_corpus(size: usize, seed: u64, contradiction_rate: f64) -> Vec<ClaimRecord> {
    synthesize_with(&SynthOptions::new(size, seed, contradiction_rate))
}

/// Generates `opts.size` records; refuted claims are single-span edits of a true fact.
pub fn synthesize_with(opts: &SynthOptions) -> Vec<ClaimRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.size)
        .map(|i| {
            let name = *NAMES.choose(&mut rng).unwrap();
            let rel = *Relation::ALL.choose(&mut rng).unwrap();
            let value = rel.random_value(&mut rng);
            let mut evidence = vec![sentence(name, rel, &value)];
            for _ in 0..opts.distractors {
                let other = loop {
                    let n = *NAMES.choose(&mut rng).unwrap();
                    if n != name {
                        break n;
                    }
                };
                let orel = *Relation::ALL.choose(&mut rng).unwrap();
                let oval = orel.random_value(&mut rng);
                evidence.push(sentence(other, orel, &oval));
            }
            if opts.shuffle_evidence {
                use rand::seq::SliceRandom;
                evidence.shuffle(&mut rng);
            }
            let refutes = rng.random::<f64>() < opts.contradiction_rate;
            let id = format!("syn{}-{i:05}", opts.seed);
            if !refutes {
                let mut r =
                    ClaimRecord::new(id, sentence(name, rel, &value), evidence, Label::Supports);
                r.tags = vec![rel.name().to_string()];
                return r;
            }
            let (edited, edit_kind) = match rel {
                Relation::Age => {
                    let base: u32 = value.parse().unwrap();
                    let v = loop {
                        let delta = rng.random_range(1..=5u32);
                        let cand = if rng.random::<bool>() {
                            base + delta
                        } else {
                            base.saturating_sub(delta)
                        };
                        if (AGE_MIN..=AGE_MAX).contains(&cand)
                            && !mentions(&evidence, &cand.to_string())
                        {
                            break cand.to_string();
                        }
                    };
                    (v, "number_perturbation")
                }
                _ => {
                    let v = loop {
                        let cand = rel.random_value(&mut rng);
                        if !mentions(&evidence, &cand) {
                            break cand;
                        }
                    };
                    (v, "entity_swap")
                }
            };
            let mut r =
                ClaimRecord::new(id, sentence(name, rel, &edited), evidence, Label::Refutes);
            r.tags = vec![rel.name().to_string(), edit_kind.to_string()];
            r.counterfactual = true;
            r.tips = Some(format!("the {} \"{edited}\" was edited", rel.name()));
            r
        })
        .collect()
}

/// Assigns splits by position: first 80% train, next 10% validation, rest test.
pub fn assign_splits(records: &mut [ClaimRecord]) {
    let n = records.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    for (i, r) in records.iter_mut().enumerate() {
        r.split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
}
