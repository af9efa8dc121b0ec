//! Contrastive training of a square linear projection over frozen sentence
//! embeddings.
//!
//! Each example is a triple `(premise, entailment, contradiction)`. With
//! `z = W h` and in-batch negatives, the per-anchor loss is
//!
//! ```text
//! l_i = -log( e^{cos(z_i, z_i+)/t} / sum_j ( e^{cos(z_i, z_j+)/t} + e^{cos(z_i, z_j-)/t} ) )
//! ```
//!
//! averaged over the batch. The gradient with respect to `W` is analytic.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::NliTriple;
use crate::evaluator::{cosine, spearman, StsExample};
use crate::gateway::{http_agent, post_json, BackendError};
use crate::promptkit::build_embedding_prompt;
use crate::rng::{derive_seed, seeded, shuffle};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ANLIPRJ1";

/// Texts sent to the embedder per call.
pub const EMBED_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("embedding failed after {embedded} of {total} texts: {source}")]
    Embedding {
        embedded: usize,
        total: usize,
        source: BackendError,
    },
    #[error("embedder returned {got} vectors for {expected} texts")]
    EmbeddingCount { expected: usize, got: usize },
    #[error("embedding {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error("{role} projection {index} has zero norm")]
    DegenerateProjection { role: &'static str, index: usize },
    #[error("batch needs at least two triples, got {0}")]
    BatchTooSmall(usize),
    #[error("dev evaluation failed: {0}")]
    Dev(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A frozen embedding of one text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_text: String,
}

pub trait EmbeddingBackend: Send + Sync {
    /// One vector per input text, in order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, BackendError>;
    fn identity(&self) -> String;
}

/// Embeds `texts` in chunks and checks that every vector is finite and of one dimension.
pub fn embed_batch(texts: &[&str], backend: &dyn EmbeddingBackend) -> Result<Vec<EmbeddingVector>, TrainError> {
    let mut out: Vec<EmbeddingVector> = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_CHUNK) {
        let vectors = backend.embed(chunk).map_err(|source| TrainError::Embedding {
            embedded: out.len(),
            total: texts.len(),
            source,
        })?;
        if vectors.len() != chunk.len() {
            return Err(TrainError::EmbeddingCount {
                expected: chunk.len(),
                got: vectors.len(),
            });
        }
        for (text, values) in chunk.iter().zip(vectors) {
            let index = out.len();
            let expected = out.first().map_or(values.len(), |v| v.values.len());
            if values.is_empty() || values.len() != expected {
                return Err(TrainError::DimensionMismatch {
                    index,
                    expected,
                    found: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite { index });
            }
            out.push(EmbeddingVector {
                values,
                source_text: (*text).to_owned(),
            });
        }
    }
    Ok(out)
}

/// OpenAI-style `/v1/embeddings` endpoint. Each text is wrapped in the
/// one-word summarisation prompt before sending.
pub struct HttpEmbeddingBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpEmbeddingBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        timeout: Duration,
        api_key: Option<String>,
    ) -> Self {
        Self {
            agent: http_agent(timeout),
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
        }
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, BackendError> {
        let prompts: Vec<String> = texts
            .iter()
            .map(|t| build_embedding_prompt(t))
            .collect::<Result<_, _>>()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        let body = serde_json::json!({ "model": self.model, "input": prompts });
        let raw = post_json(&self.agent, &self.endpoint, self.api_key.as_deref(), &body)?;
        let protocol = |message: String| BackendError::Protocol {
            message,
            raw_body: raw.clone(),
        };
        #[derive(Deserialize)]
        struct Item {
            embedding: Vec<f64>,
            #[serde(default)]
            index: Option<usize>,
        }
        #[derive(Deserialize)]
        struct Reply {
            data: Vec<Item>,
        }
        let mut reply: Reply = serde_json::from_str(&raw).map_err(|e| protocol(e.to_string()))?;
        if reply.data.iter().all(|d| d.index.is_some()) {
            reply.data.sort_by_key(|d| d.index);
        }
        Ok(reply.data.into_iter().map(|d| d.embedding).collect())
    }

    fn identity(&self) -> String {
        format!("http:{}@{}", self.model, self.endpoint)
    }
}

/// Square linear map `z = W h`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    dim: usize,
    weights: Vec<f64>,
}

impl ProjectionModel {
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self { dim, weights }
    }

    pub fn from_row_major(dim: usize, weights: Vec<f64>) -> Result<Self, TrainError> {
        if dim == 0 || weights.len() != dim * dim {
            return Err(TrainError::Checkpoint(format!(
                "{} weights do not form a {dim}x{dim} matrix",
                weights.len()
            )));
        }
        Ok(Self { dim, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>, TrainError> {
        if h.len() != self.dim {
            return Err(TrainError::DimensionMismatch {
                index: 0,
                expected: self.dim,
                found: h.len(),
            });
        }
        Ok(self.project_unchecked(h))
    }

    fn project_unchecked(&self, h: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(h).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// Layout: 8-byte magic, `u64` LE dimension, `dim * dim` `f64` LE row-major.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, TrainError> {
        let io = |e: std::io::Error| TrainError::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(io)?;
        let dim = usize::try_from(u64::from_le_bytes(word))
            .ok()
            .filter(|&d| d > 0 && d <= 1 << 16)
            .ok_or_else(|| TrainError::Checkpoint("implausible dimension".into()))?;
        let mut weights = Vec::with_capacity(dim * dim);
        for _ in 0..dim * dim {
            r.read_exact(&mut word).map_err(io)?;
            weights.push(f64::from_le_bytes(word));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Self::from_row_major(dim, weights)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of total steps spent on linear warmup.
    pub warmup_fraction: f64,
    pub temperature: f64,
    pub max_epochs: usize,
    /// Overrides the size-derived evaluation interval.
    pub eval_every_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 5e-4,
            warmup_fraction: 0.10,
            temperature: 0.05,
            max_epochs: 1,
            eval_every_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_owned()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1]");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.eval_every_steps == Some(0) {
            return bad("eval_every_steps must be at least 1");
        }
        Ok(())
    }
}

/// Dev evaluation cadence for a training set of `dataset_size` triples.
pub fn eval_interval(dataset_size: usize) -> usize {
    (dataset_size / 4000).max(1)
}

/// Learning rate at 1-based `step`: linear warmup, then constant.
pub fn learning_rate_at(step: usize, base: f64, warmup_steps: usize) -> f64 {
    if warmup_steps > 0 && step <= warmup_steps {
        base * step as f64 / warmup_steps as f64
    } else {
        base
    }
}

/// Embeddings of one training triple.
#[derive(Debug, Clone, Copy)]
pub struct TripleView<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

impl<'a> TripleView<'a> {
    fn part(&self, k: usize) -> &'a [f64] {
        match k {
            0 => self.anchor,
            1 => self.positive,
            _ => self.negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_example: Vec<f64>,
    /// dL/dW, row-major.
    pub gradient: Vec<f64>,
}

struct Normalized {
    unit: Vec<f64>,
    norm: f64,
}

fn normalize(z: Vec<f64>, role: &'static str, index: usize) -> Result<Normalized, TrainError> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(TrainError::DegenerateProjection { role, index });
    }
    Ok(Normalized {
        unit: z.iter().map(|v| v / norm).collect(),
        norm,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Batch InfoNCE loss with in-batch positives and hard negatives, and its gradient.
pub fn info_nce_loss(
    batch: &[TripleView<'_>],
    model: &ProjectionModel,
    temperature: f64,
) -> Result<LossOutput, TrainError> {
    let b = batch.len();
    if b < 2 {
        return Err(TrainError::BatchTooSmall(b));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(TrainError::InvalidConfig("temperature must be positive".into()));
    }
    let d = model.dim;
    for (i, t) in batch.iter().enumerate() {
        for v in [t.anchor, t.positive, t.negative] {
            if v.len() != d {
                return Err(TrainError::DimensionMismatch {
                    index: i,
                    expected: d,
                    found: v.len(),
                });
            }
        }
    }
    let project = |role, part| -> Result<Vec<Normalized>, TrainError> {
        batch
            .iter()
            .enumerate()
            .map(|(i, t)| normalize(model.project_unchecked(t.part(part)), role, i))
            .collect()
    };
    let za = project("anchor", 0)?;
    let zp = project("positive", 1)?;
    let zn = project("negative", 2)?;

    let scale = 1.0 / (b as f64 * temperature);
    let mut per_example = Vec::with_capacity(b);
    let mut ga = vec![vec![0.0; d]; b];
    let mut gp = vec![vec![0.0; d]; b];
    let mut gn = vec![vec![0.0; d]; b];
    let mut logits = vec![0.0; 2 * b];
    for i in 0..b {
        for j in 0..b {
            logits[j] = dot(&za[i].unit, &zp[j].unit) / temperature;
            logits[b + j] = dot(&za[i].unit, &zn[j].unit) / temperature;
        }
        // log-sum-exp as max + ln(1 + rest) so near-zero losses keep precision
        let top = (0..2 * b).fold(0, |m, j| if logits[j] > logits[m] { j } else { m });
        let max = logits[top];
        let rest: f64 = (0..2 * b).filter(|&j| j != top).map(|j| (logits[j] - max).exp()).sum();
        let log_norm = rest.ln_1p();
        per_example.push((max - logits[i]) + log_norm);
        for j in 0..2 * b {
            let p = (logits[j] - max - log_norm).exp();
            let g = (p - if j == i { 1.0 } else { 0.0 }) * scale;
            let (other, other_grad) = if j < b {
                (&zp[j], &mut gp[j])
            } else {
                (&zn[j - b], &mut gn[j - b])
            };
            for k in 0..d {
                ga[i][k] += g * other.unit[k];
                other_grad[k] += g * za[i].unit[k];
            }
        }
    }

    // Back through normalisation (dz = (du - (du.u) u) / |z|) and z = W h.
    let mut gradient = vec![0.0; d * d];
    let mut accumulate = |normed: &[Normalized], grads: &[Vec<f64>], part: usize| {
        for ((n, gu), t) in normed.iter().zip(grads).zip(batch) {
            let along = dot(gu, &n.unit);
            let h = t.part(part);
            for r in 0..d {
                let gz = (gu[r] - along * n.unit[r]) / n.norm;
                if gz != 0.0 {
                    for (c, hc) in h.iter().enumerate() {
                        gradient[r * d + c] += gz * hc;
                    }
                }
            }
        }
    };
    accumulate(&za, &ga, 0);
    accumulate(&zp, &gp, 1);
    accumulate(&zn, &gn, 2);

    let loss = per_example.iter().sum::<f64>() / b as f64;
    Ok(LossOutput {
        loss,
        per_example,
        gradient,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub dev_spearman: f64,
    pub learning_rate: f64,
}

pub fn write_log_csv<W: Write>(mut w: W, log: &[TrainLogEntry]) -> std::io::Result<()> {
    writeln!(w, "step,epoch,loss,dev_spearman,learning_rate")?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            e.step, e.epoch, e.loss, e.dev_spearman, e.learning_rate
        )?;
    }
    w.flush()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the highest dev Spearman (earliest on ties).
    pub best_model: ProjectionModel,
    pub best_step: usize,
    pub best_dev_spearman: f64,
    pub final_model: ProjectionModel,
    pub log: Vec<TrainLogEntry>,
    pub total_steps: usize,
    pub eval_every: usize,
    pub embedding_dim: usize,
}

/// Index of the maximum score; the earliest wins on ties.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains a projection with SGD, evaluating on `dev` at step 0, every
/// `eval_every` steps and after the final step.
pub fn train(
    triples: &[NliTriple],
    dev: &[StsExample],
    backend: &dyn EmbeddingBackend,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if triples.is_empty() {
        return Err(TrainError::InvalidConfig("no training triples".into()));
    }
    if dev.len() < 2 {
        return Err(TrainError::InvalidConfig("dev set needs at least two pairs".into()));
    }

    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut texts: Vec<&str> = Vec::new();
    let all_texts = triples
        .iter()
        .flat_map(|t| [t.premise.as_str(), t.entailment.as_str(), t.contradiction.as_str()])
        .chain(dev.iter().flat_map(|e| [e.sentence_a.as_str(), e.sentence_b.as_str()]));
    for s in all_texts {
        index.entry(s).or_insert_with(|| {
            texts.push(s);
            texts.len() - 1
        });
    }
    let embedded = embed_batch(&texts, backend)?;
    let dim = embedded[0].values.len();
    let vec_of = |s: &str| embedded[index[s]].values.as_slice();

    let views: Vec<TripleView<'_>> = triples
        .iter()
        .map(|t| TripleView {
            anchor: vec_of(&t.premise),
            positive: vec_of(&t.entailment),
            negative: vec_of(&t.contradiction),
        })
        .collect();
    let dev_pairs: Vec<(&[f64], &[f64])> = dev
        .iter()
        .map(|e| (vec_of(&e.sentence_a), vec_of(&e.sentence_b)))
        .collect();
    let gold: Vec<f64> = dev.iter().map(|e| e.gold_score).collect();
    let dev_score = |model: &ProjectionModel| -> Result<f64, TrainError> {
        let predicted = dev_pairs
            .iter()
            .map(|(a, b)| cosine(&model.project_unchecked(a), &model.project_unchecked(b)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TrainError::Dev(e.to_string()))?;
        spearman(&predicted, &gold).map_err(|e| TrainError::Dev(e.to_string()))
    };

    let n = views.len();
    let full = n / config.batch_size;
    let tail = n % config.batch_size;
    let steps_per_epoch = full + usize::from(tail >= 2);
    let total_steps = steps_per_epoch * config.max_epochs;
    let warmup_steps = (config.warmup_fraction * total_steps as f64).ceil() as usize;
    let eval_every = config.eval_every_steps.unwrap_or_else(|| eval_interval(n));

    let mut model = ProjectionModel::identity(dim);
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let mut record =
        |model: &ProjectionModel, step, epoch, loss, lr, log: &mut Vec<TrainLogEntry>| -> Result<(), TrainError> {
            let dev_spearman = dev_score(model)?;
            log.push(TrainLogEntry {
                step,
                epoch,
                loss,
                dev_spearman,
                learning_rate: lr,
            });
            snapshots.push(model.clone());
            Ok(())
        };

    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..config.max_epochs {
        let mut rng = seeded(derive_seed(config.seed, &format!("epoch-{epoch}")));
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<TripleView<'_>> = chunk.iter().map(|&i| views[i]).collect();
            let out = info_nce_loss(&batch, &model, config.temperature)?;
            if step == 0 {
                record(&model, 0, epoch, out.loss, 0.0, &mut log)?;
            }
            step += 1;
            let lr = learning_rate_at(step, config.learning_rate, warmup_steps);
            for (w, g) in model.weights.iter_mut().zip(&out.gradient) {
                *w -= lr * g;
            }
            if step % eval_every == 0 || step == total_steps {
                record(&model, step, epoch, out.loss, lr, &mut log)?;
            }
        }
    }
    if log.is_empty() {
        record(&model, 0, 0, f64::NAN, 0.0, &mut log)?;
    }

    let scores: Vec<f64> = log.iter().map(|e| e.dev_spearman).collect();
    let best = select_best(&scores).unwrap_or(0);
    Ok(TrainOutcome {
        best_model: snapshots[best].clone(),
        best_step: log[best].step,
        best_dev_spearman: log[best].dev_spearman,
        final_model: model,
        log,
        total_steps,
        eval_every,
        embedding_dim: dim,
    })
}
