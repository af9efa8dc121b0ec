//! Few-shot example pools and `k`-shot × `m`-set strategies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PremiseSentence;
use crate::promptkit::Relation;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum FewShotError {
    #[error("few-shot example has an empty {0}")]
    EmptyField(&'static str),
    #[error("few-shot hypothesis contains a double quote, which the extraction scheme cannot represent: {0:?}")]
    QuotedHypothesis(String),
    #[error("few-shot examples must be entailment or contradiction, got `{0}`")]
    NotGenerated(Relation),
    #[error("set {set_id} is for `{expected}` but example {index} is `{found}`")]
    MixedRelations {
        set_id: usize,
        index: usize,
        expected: Relation,
        found: Relation,
    },
    #[error("set {set_id} repeats the example at position {index}")]
    DuplicateExample { set_id: usize, index: usize },
    #[error("pool too small: {k} shots x {m} sets needs {required} `{relation}` examples, {available} available")]
    PoolTooSmall {
        relation: Relation,
        k: usize,
        m: usize,
        required: usize,
        available: usize,
    },
    #[error("number of sets must be at least 1")]
    ZeroSets,
    #[error("zero-shot strategies use exactly one set, got {0}")]
    ZeroShotWithSets(usize),
    #[error("unknown strategy `{0}` (expected e.g. 0shot, 5shot, 20shot, 1x5, 5x4)")]
    UnknownStrategy(String),
    #[error("pool line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("failed to read pool: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FewShotExample {
    premise: String,
    hypothesis: String,
    relation: Relation,
}

#[derive(Deserialize)]
struct RawExample {
    premise: String,
    hypothesis: String,
    relation: Relation,
}

impl<'de> Deserialize<'de> for FewShotExample {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawExample::deserialize(d)?;
        FewShotExample::new(raw.premise, raw.hypothesis, raw.relation).map_err(serde::de::Error::custom)
    }
}

impl FewShotExample {
    pub fn new(
        premise: impl Into<String>,
        hypothesis: impl Into<String>,
        relation: Relation,
    ) -> Result<Self, FewShotError> {
        let premise = premise.into();
        let hypothesis = hypothesis.into();
        if premise.trim().is_empty() {
            return Err(FewShotError::EmptyField("premise"));
        }
        if hypothesis.trim().is_empty() {
            return Err(FewShotError::EmptyField("hypothesis"));
        }
        if hypothesis.contains('"') {
            return Err(FewShotError::QuotedHypothesis(hypothesis));
        }
        if !relation.is_generated() {
            return Err(FewShotError::NotGenerated(relation));
        }
        Ok(Self {
            premise,
            hypothesis,
            relation,
        })
    }

    pub fn premise(&self) -> &str {
        &self.premise
    }

    pub fn hypothesis(&self) -> &str {
        &self.hypothesis
    }

    pub fn relation(&self) -> Relation {
        self.relation
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FewShotSet {
    set_id: usize,
    relation: Relation,
    examples: Vec<FewShotExample>,
}

impl FewShotSet {
    pub fn new(set_id: usize, relation: Relation, examples: Vec<FewShotExample>) -> Result<Self, FewShotError> {
        let mut seen = BTreeSet::new();
        for (index, ex) in examples.iter().enumerate() {
            if ex.relation != relation {
                return Err(FewShotError::MixedRelations {
                    set_id,
                    index,
                    expected: relation,
                    found: ex.relation,
                });
            }
            if !seen.insert((ex.premise.as_str(), ex.hypothesis.as_str())) {
                return Err(FewShotError::DuplicateExample { set_id, index });
            }
        }
        Ok(Self {
            set_id,
            relation,
            examples,
        })
    }

    pub fn set_id(&self) -> usize {
        self.set_id
    }

    pub fn relation(&self) -> Relation {
        self.relation
    }

    pub fn examples(&self) -> &[FewShotExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// `k` shots per set, `m` sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotStrategy {
    k: usize,
    m: usize,
}

impl FewShotStrategy {
    pub const ZERO_SHOT: Self = Self { k: 0, m: 1 };
    pub const ONE_SHOT: Self = Self { k: 1, m: 1 };
    pub const FIVE_SHOT: Self = Self { k: 5, m: 1 };
    pub const TWENTY_SHOT: Self = Self { k: 20, m: 1 };
    pub const ONE_SHOT_X5: Self = Self { k: 1, m: 5 };
    pub const FIVE_SHOT_X4: Self = Self { k: 5, m: 4 };

    pub fn new(k: usize, m: usize) -> Result<Self, FewShotError> {
        if m == 0 {
            return Err(FewShotError::ZeroSets);
        }
        if k == 0 && m != 1 {
            return Err(FewShotError::ZeroShotWithSets(m));
        }
        Ok(Self { k, m })
    }

    pub fn shots(&self) -> usize {
        self.k
    }

    pub fn sets(&self) -> usize {
        self.m
    }

    pub fn is_zero_shot(&self) -> bool {
        self.k == 0
    }

    /// Examples needed per relation.
    pub fn pool_requirement(&self) -> usize {
        self.k * self.m
    }
}

impl fmt::Display for FewShotStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.m == 1 {
            write!(f, "{}shot", self.k)
        } else {
            write!(f, "{}x{}", self.k, self.m)
        }
    }
}

impl FromStr for FewShotStrategy {
    type Err = FewShotError;

    /// Accepts `Nshot`, `N-shot`, `KxM` and `K-shotxM`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || FewShotError::UnknownStrategy(s.to_owned());
        let norm = s
            .trim()
            .to_ascii_lowercase()
            .replace('×', "x")
            .replace("-shot", "")
            .replace("shot", "");
        let (k, m) = match norm.split_once('x') {
            Some((k, m)) => (k.parse().map_err(|_| unknown())?, m.parse().map_err(|_| unknown())?),
            None => (norm.parse().map_err(|_| unknown())?, 1),
        };
        Self::new(k, m)
    }
}

/// Shuffles the pool with `seed` and chunks it into `m` disjoint sets of `k`.
///
/// Every pool entry must carry `relation`. Set ids run `0..m`. With `k = 0`
/// the result is `m` empty sets.
pub fn partition_pool(
    pool: &[FewShotExample],
    relation: Relation,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<FewShotSet>, FewShotError> {
    if m == 0 {
        return Err(FewShotError::ZeroSets);
    }
    if !relation.is_generated() {
        return Err(FewShotError::NotGenerated(relation));
    }
    if let Some((index, ex)) = pool.iter().enumerate().find(|(_, ex)| ex.relation != relation) {
        return Err(FewShotError::MixedRelations {
            set_id: 0,
            index,
            expected: relation,
            found: ex.relation,
        });
    }
    let required = k * m;
    if pool.len() < required {
        return Err(FewShotError::PoolTooSmall {
            relation,
            k,
            m,
            required,
            available: pool.len(),
        });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    rng::shuffle(&mut order, &mut rng::seeded(seed));
    (0..m)
        .map(|set_id| {
            let examples = order[set_id * k..(set_id + 1) * k]
                .iter()
                .map(|&i| pool[i].clone())
                .collect();
            FewShotSet::new(set_id, relation, examples)
        })
        .collect()
}

/// Round-robin assignment: the premise at input position `i` goes to set `i mod m`.
pub fn assign_premises(premises: &[PremiseSentence], m: usize) -> Result<BTreeMap<u64, usize>, FewShotError> {
    if m == 0 {
        return Err(FewShotError::ZeroSets);
    }
    Ok(premises.iter().enumerate().map(|(i, p)| (p.id, i % m)).collect())
}

/// Groups premises by their round-robin set, preserving input order within each group.
pub fn premises_by_set(premises: &[PremiseSentence], m: usize) -> Result<Vec<Vec<&PremiseSentence>>, FewShotError> {
    if m == 0 {
        return Err(FewShotError::ZeroSets);
    }
    let mut groups = vec![Vec::new(); m];
    for (i, p) in premises.iter().enumerate() {
        groups[i % m].push(p);
    }
    Ok(groups)
}

/// Reads a JSONL pool of `{premise, hypothesis, relation}` records.
pub fn read_pool<R: BufRead>(reader: R) -> Result<Vec<FewShotExample>, FewShotError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FewShotError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: FewShotExample = serde_json::from_str(&line).map_err(|e| FewShotError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Splits a mixed pool into `(entailment, contradiction)` pools, preserving order.
pub fn split_pool(pool: &[FewShotExample]) -> (Vec<FewShotExample>, Vec<FewShotExample>) {
    pool.iter().cloned().partition(|ex| ex.relation == Relation::Entailment)
}
