//! Dataset quality: NLI-classifier verdicts and label agreement ratios.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::NliPair;
use crate::gateway::{dispatch, http_agent, post_json, BackendError, DispatchPolicy, DEFAULT_API_KEY_ENV};
use crate::promptkit::Relation;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum QualityError {
    #[error("{verdicts} verdicts for {pairs} pairs")]
    Misaligned { pairs: usize, verdicts: usize },
    #[error("verdict {position} refers to pair {pair_index}")]
    OutOfOrder { position: usize, pair_index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Relation,
    #[serde(default)]
    pub confidence: Option<f64>,
}

pub trait ClassifierBackend: Send + Sync {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<Prediction, BackendError>;

    fn identity(&self) -> String;
}

/// `predicted == None` marks a pair the backend could not classify.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub pair_index: usize,
    pub predicted: Option<Relation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// Classifies every pair through the shared dispatch pool, preserving order.
pub fn classify_dataset(
    pairs: &[NliPair],
    backend: &dyn ClassifierBackend,
    policy: &DispatchPolicy,
) -> Vec<ClassifierVerdict> {
    dispatch(pairs, policy, |_, pair| {
        backend.classify(&pair.premise, &pair.hypothesis)
    })
    .into_iter()
    .enumerate()
    .map(|(pair_index, outcome)| match outcome {
        Ok(a) => ClassifierVerdict {
            pair_index,
            predicted: Some(a.value.label),
            confidence: a.value.confidence,
        },
        Err(_) => ClassifierVerdict {
            pair_index,
            predicted: None,
            confidence: None,
        },
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    /// `None` when no entailment pairs were classified.
    pub entailment_ratio: Option<f64>,
    pub contradiction_ratio: Option<f64>,
    pub n_entailment: usize,
    pub n_contradiction: usize,
    pub unclassified: usize,
    /// assigned label → predicted label → count, over classified pairs.
    pub confusion: BTreeMap<Relation, BTreeMap<Relation, usize>>,
}

impl AgreementReport {
    pub fn classified(&self) -> usize {
        self.confusion.values().flat_map(|row| row.values()).sum()
    }
}

/// Fraction of classified pairs per assigned label whose prediction matches it.
pub fn agreement_ratio(pairs: &[NliPair], verdicts: &[ClassifierVerdict]) -> Result<AgreementReport, QualityError> {
    if pairs.len() != verdicts.len() {
        return Err(QualityError::Misaligned {
            pairs: pairs.len(),
            verdicts: verdicts.len(),
        });
    }
    let mut confusion: BTreeMap<Relation, BTreeMap<Relation, usize>> = Relation::GENERATED
        .iter()
        .map(|&assigned| (assigned, Relation::ALL.iter().map(|&p| (p, 0)).collect()))
        .collect();
    let mut unclassified = 0;
    for (position, (pair, verdict)) in pairs.iter().zip(verdicts).enumerate() {
        if verdict.pair_index != position {
            return Err(QualityError::OutOfOrder {
                position,
                pair_index: verdict.pair_index,
            });
        }
        match verdict.predicted {
            Some(predicted) => {
                *confusion
                    .get_mut(&pair.label)
                    .and_then(|row| row.get_mut(&predicted))
                    .expect("labels are entailment/contradiction") += 1;
            }
            None => unclassified += 1,
        }
    }
    let row_total = |label: Relation| confusion[&label].values().sum::<usize>();
    let ratio = |label: Relation| {
        let total = row_total(label);
        (total > 0).then(|| confusion[&label][&label] as f64 / total as f64)
    };
    Ok(AgreementReport {
        entailment_ratio: ratio(Relation::Entailment),
        contradiction_ratio: ratio(Relation::Contradiction),
        n_entailment: row_total(Relation::Entailment),
        n_contradiction: row_total(Relation::Contradiction),
        unclassified,
        confusion,
    })
}

/// Renders rows as `Dataset | Entailment | Contradiction` with three decimals.
pub fn render_agreement_table(rows: &[(&str, &AgreementReport)]) -> String {
    let fmt = |r: Option<f64>| r.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.3}"));
    let width = rows
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max("Dataset".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>10}  {:>13}",
        "Dataset", "Entailment", "Contradiction"
    );
    for (name, report) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>13}",
            name,
            fmt(report.entailment_ratio),
            fmt(report.contradiction_ratio)
        );
    }
    out
}

/// Draws up to `per_label` pairs of each label without replacement, keeping input order.
pub fn sample_per_label(pairs: &[NliPair], per_label: usize, seed: u64) -> Vec<NliPair> {
    sample_groups(pairs, per_label, seed, |p| p.label.as_str().to_owned())
}

/// Draws up to `per_set` pairs from each (set id, label) group, keeping input order.
pub fn sample_per_set(pairs: &[NliPair], per_set: usize, seed: u64) -> Vec<NliPair> {
    sample_groups(pairs, per_set, seed, |p| {
        format!("{:?}/{}", p.provenance.set_id, p.label)
    })
}

fn sample_groups(pairs: &[NliPair], cap: usize, seed: u64, key: impl Fn(&NliPair) -> String) -> Vec<NliPair> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(key(p)).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (name, mut indices) in groups {
        rng::shuffle(&mut indices, &mut rng::seeded(rng::derive_seed(seed, &name)));
        indices.truncate(cap);
        chosen.extend(indices);
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pairs[i].clone()).collect()
}

/// Rule-based classifier: an explicit `(premise, hypothesis) → label` table,
/// falling back to a lexical heuristic for unknown pairs.
#[derive(Debug, Clone, Default)]
pub struct OracleClassifier {
    table: HashMap<(String, String), Relation>,
    heuristic_fallback: bool,
}

const NEGATION_CUES: &[&str] = &["not", "never", "no", "nobody", "nothing", "false", "neither", "nor"];

impl OracleClassifier {
    pub fn from_table(entries: impl IntoIterator<Item = (String, String, Relation)>) -> Self {
        Self {
            table: entries.into_iter().map(|(p, h, r)| ((p, h), r)).collect(),
            heuristic_fallback: false,
        }
    }

    pub fn heuristic() -> Self {
        Self {
            table: HashMap::new(),
            heuristic_fallback: true,
        }
    }

    pub fn with_heuristic_fallback(mut self) -> Self {
        self.heuristic_fallback = true;
        self
    }

    /// Negation cue in the hypothesis but not the premise → contradiction;
    /// at least half of the hypothesis words present in the premise →
    /// entailment; otherwise neutral.
    pub fn heuristic_label(premise: &str, hypothesis: &str) -> Relation {
        let words = |s: &str| -> Vec<String> {
            s.split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(str::to_lowercase)
                .collect()
        };
        let p: HashSet<String> = words(premise).into_iter().collect();
        let h = words(hypothesis);
        let negated = |w: &String| NEGATION_CUES.contains(&w.as_str());
        if h.iter().any(negated) && !p.iter().any(negated) {
            return Relation::Contradiction;
        }
        if h.is_empty() {
            return Relation::Neutral;
        }
        let shared = h.iter().filter(|w| p.contains(*w)).count();
        if 2 * shared >= h.len() {
            Relation::Entailment
        } else {
            Relation::Neutral
        }
    }
}

impl ClassifierBackend for OracleClassifier {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<Prediction, BackendError> {
        if let Some(&label) = self.table.get(&(premise.to_owned(), hypothesis.to_owned())) {
            return Ok(Prediction {
                label,
                confidence: Some(1.0),
            });
        }
        if self.heuristic_fallback {
            return Ok(Prediction {
                label: Self::heuristic_label(premise, hypothesis),
                confidence: None,
            });
        }
        Err(BackendError::Fatal("pair not in oracle table".into()))
    }

    fn identity(&self) -> String {
        "oracle".into()
    }
}

/// Classification endpoint: POST `{premise, hypothesis}` → `{label, confidence}`.
pub struct HttpClassifier {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpClassifier {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            agent: http_agent(timeout),
            endpoint: endpoint.into(),
            api_key: std::env::var(DEFAULT_API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }
}

impl ClassifierBackend for HttpClassifier {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<Prediction, BackendError> {
        let body = serde_json::json!({ "premise": premise, "hypothesis": hypothesis });
        let raw = post_json(&self.agent, &self.endpoint, self.api_key.as_deref(), &body)?;
        let prediction: Prediction = serde_json::from_str(&raw).map_err(|e| BackendError::Protocol {
            message: e.to_string(),
            raw_body: raw.clone(),
        })?;
        if let Some(c) = prediction.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(BackendError::Protocol {
                    message: format!("confidence {c} outside [0, 1]"),
                    raw_body: raw,
                });
            }
        }
        Ok(prediction)
    }

    fn identity(&self) -> String {
        format!("http:{}", self.endpoint)
    }
}
