//! A small deterministic world for exercising the pipeline offline.
//!
//! Sentences are built from a frame of function words plus content words.
//! The [`BagOfWordsEmbedder`] gives function words a large weight, so raw
//! cosine similarity is dominated by the frame. [`echo_reply`] produces
//! entailments that keep the content under a new frame, and contradictions
//! that keep the frame but swap the content and add a negation. A projection
//! trained on such triples learns to suppress the frame directions.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::evaluator::StsExample;
use crate::fewshot::FewShotExample;
use crate::gateway::{BackendError, ReplyFn};
use crate::promptkit::Relation;
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::trainer::EmbeddingBackend;

pub const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "of", "in", "it", "was", "is", "that", "and", "to", "on", "with", "for", "by", "as", "at",
];

/// Four-slot frames; `{}` marks a content word.
const FRAMES: &[&str] = &[
    "the {} of the {} was in the {} with {}.",
    "it is {} that a {} and the {} was {}.",
    "a {} was {} by the {} of {}.",
    "in the {} it was {} to {} the {}.",
    "the {} is on the {} as {} for {}.",
    "at the {} a {} was with {} and {}.",
];

const SYLLABLES: &[&str] = &[
    "ba", "ko", "mi", "ru", "te", "sa", "lo", "ve", "ni", "du", "pa", "zi", "go", "he", "fu", "ra",
];

/// The `i`th synthetic content word, e.g. `bako`.
pub fn content_word(i: usize) -> String {
    let n = SYLLABLES.len();
    format!(
        "{}{}{}",
        SYLLABLES[i % n],
        SYLLABLES[(i / n) % n],
        SYLLABLES[(i / (n * n)) % n]
    )
}

/// A different content word standing in for the opposite of `word`.
pub fn swap_word(word: &str) -> String {
    word.chars().rev().collect::<String>() + "x"
}

pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn is_function_word(token: &str) -> bool {
    FUNCTION_WORDS.contains(&token)
}

fn fill(frame: &str, words: &[String]) -> String {
    let mut out = String::new();
    let mut parts = frame.split("{}");
    out.push_str(parts.next().unwrap_or_default());
    for (part, word) in parts.zip(words) {
        out.push_str(word);
        out.push_str(part);
    }
    let mut chars = out.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => out,
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub vocabulary: usize,
    seed: u64,
}

impl SyntheticWorld {
    pub fn new(seed: u64) -> Self {
        Self { vocabulary: 600, seed }
    }

    fn rng(&self, label: &str) -> SeededRng {
        seeded(derive_seed(self.seed, label))
    }

    fn content(&self, rng: &mut SeededRng, n: usize) -> Vec<String> {
        let mut picked: Vec<usize> = Vec::with_capacity(n);
        while picked.len() < n {
            let w = rng.random_range(0..self.vocabulary);
            if !picked.contains(&w) {
                picked.push(w);
            }
        }
        picked.into_iter().map(content_word).collect()
    }

    /// `n` distinct premise sentences of 8 to 12 tokens.
    pub fn premises(&self, n: usize, label: &str) -> Vec<String> {
        let mut rng = self.rng(&format!("premises/{label}"));
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let frame = FRAMES.choose(&mut rng).expect("frames");
            let words = self.content(&mut rng, 4);
            let s = fill(frame, &words);
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    }

    /// Few-shot pool with `per_relation` examples of each generated relation.
    pub fn fewshot_pool(&self, per_relation: usize) -> Vec<FewShotExample> {
        let premises = self.premises(per_relation * 2, "fewshot");
        premises
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let relation = if i % 2 == 0 {
                    Relation::Entailment
                } else {
                    Relation::Contradiction
                };
                FewShotExample::new(p.clone(), echo_hypothesis(relation, p), relation)
                    .expect("synthetic example is valid")
            })
            .collect()
    }

    /// STS pairs whose gold score is the number of shared content words (0 to 4).
    /// Half the pairs reuse the frame of the first sentence regardless of overlap.
    pub fn sts(&self, n: usize, label: &str) -> Vec<StsExample> {
        let mut rng = self.rng(&format!("sts/{label}"));
        (0..n)
            .map(|_| {
                let frame_a = *FRAMES.choose(&mut rng).expect("frames");
                let frame_b = if rng.random_bool(0.5) {
                    frame_a
                } else {
                    *FRAMES.choose(&mut rng).expect("frames")
                };
                let words_a = self.content(&mut rng, 4);
                let shared = rng.random_range(0..=4usize);
                let mut words_b = self.content(&mut rng, 8);
                words_b.retain(|w| !words_a.contains(w));
                words_b.truncate(4 - shared);
                words_b.extend(words_a.iter().take(shared).cloned());
                let mut idx: Vec<usize> = (0..4).collect();
                crate::rng::shuffle(&mut idx, &mut rng);
                let words_b: Vec<String> = idx.iter().map(|&i| words_b[i].clone()).collect();
                StsExample {
                    sentence_a: fill(frame_a, &words_a),
                    sentence_b: fill(frame_b, &words_b),
                    gold_score: shared as f64 * 1.25,
                }
            })
            .collect()
    }
}

/// The clean hypothesis an idealised generator would write for `premise`.
pub fn echo_hypothesis(relation: Relation, premise: &str) -> String {
    let toks = tokens(premise);
    match relation {
        Relation::Contradiction => {
            let mut out: Vec<String> = Vec::with_capacity(toks.len() + 1);
            for (i, t) in toks.iter().enumerate() {
                if is_function_word(t) {
                    out.push(t.clone());
                } else {
                    out.push(swap_word(t));
                }
                if i == 0 {
                    out.push("not".into());
                }
            }
            fill(&(out.join(" ") + "."), &[])
        }
        _ => {
            let content: Vec<&String> = toks.iter().filter(|t| !is_function_word(t)).collect();
            let body = content.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
            fill(&format!("so {body} indeed."), &[])
        }
    }
}

/// Mock completion: the echo hypothesis, closed with `"` and followed by
/// the kind of trailing text a real model emits.
pub fn echo_reply() -> ReplyFn {
    Arc::new(|relation, premise| format!("{}\" </s> Answer: more", echo_hypothesis(relation, premise)))
}

/// Hash-seeded Gaussian bag-of-words embedding, normalised to unit length.
#[derive(Debug, Clone)]
pub struct BagOfWordsEmbedder {
    pub dim: usize,
    pub function_weight: f64,
    seed: u64,
}

impl BagOfWordsEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            function_weight: 2.5,
            seed,
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = seeded(derive_seed(self.seed, &format!("tok/{token}")));
        (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let toks = tokens(text);
        let mut v = vec![0.0; self.dim];
        if toks.is_empty() {
            v = self.token_vector(&format!("<raw>{text}"));
        }
        for t in &toks {
            let w = if is_function_word(t) { self.function_weight } else { 1.0 };
            for (a, b) in v.iter_mut().zip(self.token_vector(t)) {
                *a += w * b;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingBackend for BagOfWordsEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn identity(&self) -> String {
        format!("bag-of-words:d{}:s{}", self.dim, self.seed)
    }
}
