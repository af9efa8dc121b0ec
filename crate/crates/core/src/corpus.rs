//! Premise corpus: ingestion, token counting, length filtering and sampling.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid length filter: min_tokens={min} max_tokens={max} (need 1 <= min <= max)")]
    InvalidFilter { min: usize, max: usize },
    #[error("cannot sample {requested} premises from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("failed to read corpus: {0}")]
    Io(#[from] std::io::Error),
}

/// Counts tokens in a sentence. The default is whitespace splitting; a
/// subword tokenizer can be plugged in behind this trait.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

impl<F> TokenCounter for F
where
    F: Fn(&str) -> usize + Send + Sync,
{
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

/// Number of whitespace-delimited tokens in `text`.
pub fn count_tokens(text: &str) -> usize {
    WhitespaceCounter.count(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PremiseSentence {
    pub id: u64,
    pub text: String,
    pub token_count: usize,
}

impl PremiseSentence {
    /// Builds a premise, trimming the text. Returns `None` for blank input.
    pub fn new(id: u64, text: &str, counter: &dyn TokenCounter) -> Option<Self> {
        let text = text.trim();
        if text.is_empty() {
            return None;
        }
        Some(Self {
            id,
            text: text.to_owned(),
            token_count: counter.count(text),
        })
    }
}

/// Inclusive token-count window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthFilter {
    min_tokens: usize,
    max_tokens: usize,
}

impl LengthFilter {
    pub fn new(min_tokens: usize, max_tokens: usize) -> Result<Self, CorpusError> {
        if min_tokens == 0 || min_tokens > max_tokens {
            return Err(CorpusError::InvalidFilter {
                min: min_tokens,
                max: max_tokens,
            });
        }
        Ok(Self { min_tokens, max_tokens })
    }

    pub fn min_tokens(&self) -> usize {
        self.min_tokens
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn accepts(&self, token_count: usize) -> bool {
        (self.min_tokens..=self.max_tokens).contains(&token_count)
    }
}

impl Default for LengthFilter {
    fn default() -> Self {
        Self {
            min_tokens: 4,
            max_tokens: 32,
        }
    }
}

/// Keeps premises whose token count lies inside the filter window, in input order.
pub fn filter_premises(corpus: &[PremiseSentence], filter: &LengthFilter) -> Vec<PremiseSentence> {
    corpus
        .iter()
        .filter(|p| filter.accepts(p.token_count))
        .cloned()
        .collect()
}

/// Splits the corpus into `(kept, rejected)`, both in input order.
pub fn partition_premises(
    corpus: &[PremiseSentence],
    filter: &LengthFilter,
) -> (Vec<PremiseSentence>, Vec<PremiseSentence>) {
    corpus.iter().cloned().partition(|p| filter.accepts(p.token_count))
}

/// Draws `n` distinct premises without replacement.
///
/// Algorithm: ChaCha8 seeded from `seed`, a partial Fisher–Yates pass over the
/// index range selecting `n` positions, then the selected indices are sorted
/// so the output keeps corpus order.
pub fn sample_premises(corpus: &[PremiseSentence], n: usize, seed: u64) -> Result<Vec<PremiseSentence>, CorpusError> {
    if n > corpus.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: corpus.len(),
        });
    }
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = rng::seeded(seed);
    for i in 0..n {
        let j = rand::Rng::random_range(&mut rng, i..indices.len());
        indices.swap(i, j);
    }
    let mut chosen = indices[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| corpus[i].clone()).collect())
}

/// Reads a one-sentence-per-line corpus. Blank lines are skipped; ids are the
/// zero-based position among non-blank lines.
pub fn read_corpus<R: BufRead>(reader: R, counter: &dyn TokenCounter) -> Result<Vec<PremiseSentence>, CorpusError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if let Some(p) = PremiseSentence::new(out.len() as u64, &line, counter) {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn write_corpus<W: std::io::Write>(mut writer: W, corpus: &[PremiseSentence]) -> std::io::Result<()> {
    for p in corpus {
        writeln!(writer, "{}", p.text)?;
    }
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn premise_with_len(id: u64, len: usize) -> PremiseSentence {
        let text = (0..len).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        PremiseSentence {
            id,
            text,
            token_count: len,
        }
    }

    #[test]
    fn counts_whitespace_tokens() {
        assert_eq!(count_tokens("I have a dog."), 4);
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("It concluded in July 2019."), 5);
        assert_eq!(count_tokens("  spaced \t out\n words "), 3);
    }

    #[test]
    fn pluggable_counter() {
        let chars = |t: &str| t.chars().count();
        let p = PremiseSentence::new(0, "abc", &chars).unwrap();
        assert_eq!(p.token_count, 3);
    }

    #[test]
    fn filter_bounds_are_inclusive() {
        let corpus: Vec<_> = [3, 4, 32, 33]
            .iter()
            .enumerate()
            .map(|(i, &n)| premise_with_len(i as u64, n))
            .collect();
        let kept = filter_premises(&corpus, &LengthFilter::default());
        let lens: Vec<_> = kept.iter().map(|p| p.token_count).collect();
        assert_eq!(lens, vec![4, 32]);
        assert!(filter_premises(&[], &LengthFilter::default()).is_empty());
    }

    #[test]
    fn filter_matches_brute_force_on_random_lengths() {
        let mut rng = rng::seeded(42);
        let corpus: Vec<_> = (0..100)
            .map(|i| premise_with_len(i, rand::Rng::random_range(&mut rng, 0..50)))
            .collect();
        let kept = filter_premises(&corpus, &LengthFilter::default());
        let mut expected = Vec::new();
        for p in &corpus {
            if p.token_count >= 4 && p.token_count <= 32 {
                expected.push(p.id);
            }
        }
        assert_eq!(kept.iter().map(|p| p.id).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn invalid_filters_rejected() {
        assert!(LengthFilter::new(0, 5).is_err());
        assert!(LengthFilter::new(6, 5).is_err());
        assert!(LengthFilter::new(5, 5).is_ok());
    }

    #[test]
    fn exhaustive_sample_returns_whole_corpus() {
        let corpus: Vec<_> = (0..10).map(|i| premise_with_len(i, 5)).collect();
        assert_eq!(sample_premises(&corpus, 10, 123).unwrap(), corpus);
    }

    #[test]
    fn sample_is_deterministic() {
        let corpus: Vec<_> = (0..50).map(|i| premise_with_len(i, 5)).collect();
        assert_eq!(
            sample_premises(&corpus, 5, 7).unwrap(),
            sample_premises(&corpus, 5, 7).unwrap()
        );
    }

    #[test]
    fn different_seeds_give_different_subsets() {
        let corpus: Vec<_> = (0..1000).map(|i| premise_with_len(i, 5)).collect();
        let a = sample_premises(&corpus, 100, 1).unwrap();
        let b = sample_premises(&corpus, 100, 2).unwrap();
        let ids_a: std::collections::BTreeSet<_> = a.iter().map(|p| p.id).collect();
        let shared = b.iter().filter(|p| ids_a.contains(&p.id)).count();
        // Expected overlap for two independent 10% samples is ~10 of 100.
        assert!(shared < 30, "overlap {shared} too large");
        assert_ne!(a, b);
    }

    #[test]
    fn oversized_sample_is_an_error() {
        let corpus: Vec<_> = (0..3).map(|i| premise_with_len(i, 5)).collect();
        assert!(matches!(
            sample_premises(&corpus, 4, 0),
            Err(CorpusError::SampleTooLarge {
                requested: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn reader_skips_blank_lines() {
        let input = "First one here.\n\n   \nSecond sentence is here.\n";
        let corpus = read_corpus(input.as_bytes(), &WhitespaceCounter).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[1].id, 1);
        assert_eq!(corpus[1].text, "Second sentence is here.");
        assert_eq!(corpus[1].token_count, 4);
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_partitions(lens in prop::collection::vec(0usize..60, 0..80)) {
            let corpus: Vec<_> = lens.iter().enumerate().map(|(i, &n)| premise_with_len(i as u64, n)).collect();
            let f = LengthFilter::default();
            let once = filter_premises(&corpus, &f);
            prop_assert_eq!(&filter_premises(&once, &f), &once);
            let (kept, rejected) = partition_premises(&corpus, &f);
            prop_assert_eq!(&kept, &once);
            prop_assert_eq!(kept.len() + rejected.len(), corpus.len());
        }

        #[test]
        fn sample_is_distinct_subset(size in 1usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let corpus: Vec<_> = (0..size as u64).map(|i| premise_with_len(i, 5)).collect();
            let n = ((size as f64) * frac) as usize;
            let s = sample_premises(&corpus, n, seed).unwrap();
            prop_assert_eq!(s.len(), n);
            let ids: std::collections::BTreeSet<_> = s.iter().map(|p| p.id).collect();
            prop_assert_eq!(ids.len(), n);
            prop_assert!(ids.iter().all(|&id| id < size as u64));
        }
    }
}
