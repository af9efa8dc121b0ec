//! Generated NLI records: JSONL storage, merging, triples and the size schedule.
//!
//! # Record schema
//!
//! One JSON object per line, UTF-8:
//!
//! ```text
//! {"premise": str, "hypothesis": str, "label": "entailment" | "contradiction",
//!  "provenance": {"strategy": str, "set_id": int | null, "backend": str, "timestamp": str}}
//! ```
//!
//! `premise != hypothesis` and both are non-empty.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::count_tokens;
use crate::promptkit::Relation;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("hypothesis is identical to the premise")]
    HypothesisEqualsPremise,
    #[error("empty {0}")]
    EmptyField(&'static str),
    #[error("label must be entailment or contradiction, got `{0}`")]
    UngeneratedLabel(Relation),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schedule exponent {0} is outside 0..=6")]
    ExponentOutOfRange(u32),
    #[error("slice needs {required} records, dataset has {available}")]
    InsufficientData { required: usize, available: usize },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: String,
    pub set_id: Option<usize>,
    pub backend: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: Relation,
    pub provenance: Provenance,
}

#[derive(Deserialize)]
struct RawPair {
    premise: String,
    hypothesis: String,
    label: Relation,
    provenance: Provenance,
}

impl TryFrom<RawPair> for NliPair {
    type Error = DatasetError;

    fn try_from(raw: RawPair) -> Result<Self, Self::Error> {
        NliPair::new(raw.premise, raw.hypothesis, raw.label, raw.provenance)
    }
}

impl NliPair {
    pub fn new(
        premise: impl Into<String>,
        hypothesis: impl Into<String>,
        label: Relation,
        provenance: Provenance,
    ) -> Result<Self, DatasetError> {
        let premise = premise.into();
        let hypothesis = hypothesis.into();
        if premise.trim().is_empty() {
            return Err(DatasetError::EmptyField("premise"));
        }
        if hypothesis.trim().is_empty() {
            return Err(DatasetError::EmptyField("hypothesis"));
        }
        if premise == hypothesis {
            return Err(DatasetError::HypothesisEqualsPremise);
        }
        if !label.is_generated() {
            return Err(DatasetError::UngeneratedLabel(label));
        }
        Ok(Self {
            premise,
            hypothesis,
            label,
            provenance,
        })
    }
}

/// Premise with one entailed and one contradicting hypothesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliTriple {
    pub premise: String,
    pub entailment: String,
    pub contradiction: String,
}

impl NliTriple {
    /// Returns `None` unless all three texts are non-empty and pairwise distinct.
    pub fn new(premise: String, entailment: String, contradiction: String) -> Option<Self> {
        let ok = [&premise, &entailment, &contradiction]
            .iter()
            .all(|s| !s.trim().is_empty())
            && premise != entailment
            && premise != contradiction
            && entailment != contradiction;
        ok.then_some(Self {
            premise,
            entailment,
            contradiction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripleJoin {
    pub triples: Vec<NliTriple>,
    /// Premises lacking one of the two labels, or whose hypotheses coincide.
    pub dropped: usize,
}

/// Joins pairs on premise. The first hypothesis seen per label wins; output
/// follows first-appearance order of the premise.
pub fn pairs_to_triples(pairs: &[NliPair]) -> TripleJoin {
    let mut order: Vec<&str> = Vec::new();
    let mut sides: HashMap<&str, (Option<&str>, Option<&str>)> = HashMap::new();
    for pair in pairs {
        let entry = sides.entry(pair.premise.as_str()).or_insert_with(|| {
            order.push(pair.premise.as_str());
            (None, None)
        });
        match pair.label {
            Relation::Entailment => {
                entry.0.get_or_insert(pair.hypothesis.as_str());
            }
            Relation::Contradiction => {
                entry.1.get_or_insert(pair.hypothesis.as_str());
            }
            Relation::Neutral => {}
        }
    }
    let mut join = TripleJoin::default();
    for premise in order {
        let triple = match sides[premise] {
            (Some(e), Some(c)) => NliTriple::new(premise.to_owned(), e.to_owned(), c.to_owned()),
            _ => None,
        };
        match triple {
            Some(t) => join.triples.push(t),
            None => join.dropped += 1,
        }
    }
    join
}

/// Removes exact duplicates on `(premise, hypothesis, label)`; first occurrence wins.
pub fn dedup(pairs: Vec<NliPair>) -> Vec<NliPair> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let key = (pair.premise.clone(), pair.hypothesis.clone(), pair.label);
        if seen.insert(key) {
            out.push(pair);
        }
    }
    out
}

/// Concatenates datasets in order, then removes exact duplicates.
pub fn merge(datasets: &[Vec<NliPair>]) -> Vec<NliPair> {
    dedup(datasets.iter().flatten().cloned().collect())
}

/// Takes records round-robin across datasets (first record of each, then the
/// second of each, ...), then removes exact duplicates. Any prefix of the
/// result draws evenly from every input.
pub fn interleave(datasets: &[Vec<NliPair>]) -> Vec<NliPair> {
    let longest = datasets.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(datasets.iter().map(Vec::len).sum());
    for i in 0..longest {
        for ds in datasets {
            if let Some(p) = ds.get(i) {
                out.push(p.clone());
            }
        }
    }
    dedup(out)
}

/// Dataset sizes `4000 * 2^n` for `n = 0..=6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeSchedule;

impl SizeSchedule {
    pub const BASE: usize = 4000;
    pub const MAX_EXPONENT: u32 = 6;

    pub fn size(n: u32) -> Result<usize, DatasetError> {
        if n > Self::MAX_EXPONENT {
            return Err(DatasetError::ExponentOutOfRange(n));
        }
        Ok(Self::BASE << n)
    }

    pub fn sizes() -> Vec<usize> {
        (0..=Self::MAX_EXPONENT).map(|n| Self::BASE << n).collect()
    }
}

/// First `4000 * 2^n` records in stored order.
pub fn take_schedule_slice(dataset: &[NliPair], n: u32) -> Result<Vec<NliPair>, DatasetError> {
    let required = SizeSchedule::size(n)?;
    if dataset.len() < required {
        return Err(DatasetError::InsufficientData {
            required,
            available: dataset.len(),
        });
    }
    Ok(dataset[..required].to_vec())
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<NliPair>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: NliPair = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

/// Validates every line, collecting all errors instead of stopping at the first.
pub fn check_pairs<R: BufRead>(reader: R) -> Result<(usize, Vec<DatasetError>), DatasetError> {
    let mut valid = 0;
    let mut errors = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<NliPair>(&line) {
            Ok(_) => valid += 1,
            Err(e) => errors.push(DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok((valid, errors))
}

pub fn write_pairs<W: Write>(mut writer: W, pairs: &[NliPair]) -> Result<(), DatasetError> {
    for pair in pairs {
        serde_json::to_writer(&mut writer, pair).map_err(|e| DatasetError::Io(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Counters produced while generating a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub prompts: usize,
    pub completed: usize,
    pub backend_failures: usize,
    pub extraction_failures: usize,
    pub extraction_retries: usize,
    pub invalid_pairs: usize,
    pub pairs: usize,
}

impl GenerationStats {
    pub fn extraction_failure_rate(&self) -> Option<f64> {
        (self.completed > 0).then(|| self.extraction_failures as f64 / self.completed as f64)
    }

    pub fn absorb(&mut self, other: &GenerationStats) {
        self.prompts += other.prompts;
        self.completed += other.completed;
        self.backend_failures += other.backend_failures;
        self.extraction_failures += other.extraction_failures;
        self.extraction_retries += other.extraction_retries;
        self.invalid_pairs += other.invalid_pairs;
        self.pairs += other.pairs;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub records: usize,
    pub per_label: BTreeMap<Relation, usize>,
    /// Keyed by set id; `"none"` for records without one.
    pub per_set: BTreeMap<String, usize>,
    pub premises: usize,
    /// Token count → number of hypotheses.
    pub hypothesis_lengths: BTreeMap<usize, usize>,
    pub premise_lengths: BTreeMap<usize, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extraction_failure_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_failure_rate: Option<f64>,
}

pub fn dataset_stats(pairs: &[NliPair], generation: Option<GenerationStats>) -> DatasetStats {
    let mut per_label = BTreeMap::new();
    let mut per_set = BTreeMap::new();
    let mut hypothesis_lengths = BTreeMap::new();
    let mut premise_lengths = BTreeMap::new();
    let mut premises = HashSet::new();
    for p in pairs {
        *per_label.entry(p.label).or_insert(0) += 1;
        let set = p.provenance.set_id.map_or_else(|| "none".to_owned(), |s| s.to_string());
        *per_set.entry(set).or_insert(0) += 1;
        *hypothesis_lengths.entry(count_tokens(&p.hypothesis)).or_insert(0) += 1;
        if premises.insert(p.premise.as_str()) {
            *premise_lengths.entry(count_tokens(&p.premise)).or_insert(0) += 1;
        }
    }
    let extraction_failure_rate = generation.as_ref().and_then(GenerationStats::extraction_failure_rate);
    let backend_failure_rate = generation
        .as_ref()
        .and_then(|g| (g.prompts > 0).then(|| g.backend_failures as f64 / g.prompts as f64));
    DatasetStats {
        records: pairs.len(),
        per_label,
        per_set,
        premises: premises.len(),
        hypothesis_lengths,
        premise_lengths,
        generation,
        extraction_failure_rate,
        backend_failure_rate,
    }
}
