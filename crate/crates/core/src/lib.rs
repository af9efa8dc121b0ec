//! Few-shot NLI dataset generation and desk-scale sentence-embedding evaluation.
//!
//! The crate is organised as a pipeline:
//!
//! - [`corpus`]: premise ingestion, token counting, length filtering, sampling.
//! - [`promptkit`]: generation and embedding prompts, hypothesis extraction.
//! - [`fewshot`]: few-shot example pools, `k`-shot × `m`-set strategies.
//! - [`gateway`]: bounded-concurrency completion dispatch with retries, plus
//!   an instrumented mock backend.
//! - [`dataset`]: NLI pair/triple records, JSONL storage, merging, size schedule.
//! - [`generation`]: prompts for every premise and relation, completion,
//!   extraction and record assembly.
//! - [`quality`]: NLI-classifier scoring and agreement ratios.
//! - [`trainer`]: contrastive training of a linear projection head.
//! - [`evaluator`]: cosine similarity, tie-aware Spearman, STS reports.
//! - [`synthetic`]: a deterministic toy world (premises, embeddings, STS sets)
//!   for running the whole pipeline without network access.

pub mod corpus;
pub mod dataset;
pub mod evaluator;
pub mod fewshot;
pub mod gateway;
pub mod generation;
pub mod promptkit;
pub mod quality;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use corpus::{count_tokens, filter_premises, sample_premises, LengthFilter, PremiseSentence};
pub use dataset::{NliPair, NliTriple, Provenance, SizeSchedule};
pub use evaluator::{cosine, spearman, EvalReport, StsExample};
pub use fewshot::{FewShotExample, FewShotSet, FewShotStrategy};
pub use promptkit::{build_embedding_prompt, extract_hypothesis, Relation, RenderedPrompt};
pub use trainer::{ProjectionModel, TrainConfig};
