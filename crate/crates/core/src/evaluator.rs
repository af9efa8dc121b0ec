//! STS evaluation: cosine similarity, tie-aware Spearman correlation and
//! multi-dataset reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::{embed_batch, EmbeddingBackend, ProjectionModel, TrainError};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("vectors have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("sequences have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined: {0}")]
    Undefined(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Embedding(e.to_string())
    }
}

/// `<u, v> / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::DimensionMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start..end (0-based) → ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::Undefined("fewer than two observations"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(EvalError::Undefined("non-finite input"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Undefined("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(EvalError::Undefined("NaN input"));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsExample {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold_score: f64,
}

/// Zero-based TSV column positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub score: usize,
    pub sentence_a: usize,
    pub sentence_b: usize,
    pub skip_header: bool,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            score: 0,
            sentence_a: 1,
            sentence_b: 2,
            skip_header: false,
        }
    }
}

/// Reads tab-separated STS pairs (default layout `score \t sentence_a \t sentence_b`).
pub fn read_sts<R: BufRead>(reader: R, mapping: &ColumnMapping) -> Result<Vec<StsExample>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Io(e.to_string()))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || (mapping.skip_header && i == 0) {
            continue;
        }
        let parse_err = |message: String| EvalError::Parse { line: i + 1, message };
        let cols: Vec<&str> = line.split('\t').collect();
        let col = |idx: usize, what: &str| {
            cols.get(idx)
                .copied()
                .ok_or_else(|| parse_err(format!("missing {what} column {idx}")))
        };
        let score_text = col(mapping.score, "score")?;
        let gold_score: f64 = score_text
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad score {score_text:?}")))?;
        if !gold_score.is_finite() {
            return Err(parse_err("score is not finite".into()));
        }
        let a = col(mapping.sentence_a, "sentence_a")?.trim();
        let b = col(mapping.sentence_b, "sentence_b")?.trim();
        if a.is_empty() || b.is_empty() {
            return Err(parse_err("empty sentence".into()));
        }
        out.push(StsExample {
            sentence_a: a.to_owned(),
            sentence_b: b.to_owned(),
            gold_score,
        });
    }
    Ok(out)
}

pub fn write_sts<W: std::io::Write>(mut writer: W, examples: &[StsExample]) -> std::io::Result<()> {
    for ex in examples {
        writeln!(writer, "{}\t{}\t{}", ex.gold_score, ex.sentence_a, ex.sentence_b)?;
    }
    writer.flush()
}

/// Embeds all distinct sentences once and returns the projected cosine per example.
pub fn predicted_similarities(
    model: &ProjectionModel,
    backend: &dyn EmbeddingBackend,
    examples: &[StsExample],
) -> Result<Vec<f64>, EvalError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut texts: Vec<&str> = Vec::new();
    for ex in examples {
        for s in [ex.sentence_a.as_str(), ex.sentence_b.as_str()] {
            index.entry(s).or_insert_with(|| {
                texts.push(s);
                texts.len() - 1
            });
        }
    }
    let vectors = embed_batch(&texts, backend)?;
    let projected: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| model.project(&v.values))
        .collect::<Result<_, _>>()?;
    examples
        .iter()
        .map(|ex| {
            cosine(
                &projected[index[ex.sentence_a.as_str()]],
                &projected[index[ex.sentence_b.as_str()]],
            )
        })
        .collect()
}

/// Spearman between projected cosines and gold scores for one set of examples.
pub fn score_examples(
    model: &ProjectionModel,
    backend: &dyn EmbeddingBackend,
    examples: &[StsExample],
) -> Result<f64, EvalError> {
    let predicted = predicted_similarities(model, backend, examples)?;
    let gold: Vec<f64> = examples.iter().map(|e| e.gold_score).collect();
    spearman(&predicted, &gold)
}

/// How multiple files of one named dataset are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// All pairs of the dataset are pooled into one correlation.
    #[default]
    Pooled,
    /// One correlation per file, then the mean.
    PerFileMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub spearman: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedDataset {
    pub name: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_dataset: Vec<DatasetScore>,
    /// Mean of `per_dataset`; `None` when every dataset was excluded.
    pub average: Option<f64>,
    pub excluded: Vec<ExcludedDataset>,
}

impl EvalReport {
    pub fn from_scores(per_dataset: Vec<DatasetScore>, excluded: Vec<ExcludedDataset>) -> Self {
        let average = (!per_dataset.is_empty())
            .then(|| per_dataset.iter().map(|d| d.spearman).sum::<f64>() / per_dataset.len() as f64);
        Self {
            per_dataset,
            average,
            excluded,
        }
    }

    /// One header row and one value row, values multiplied by 100.
    pub fn render_table(&self, model_label: &str) -> String {
        let mut header = format!("{:<20}", "Model");
        let mut row = format!("{model_label:<20}");
        for d in &self.per_dataset {
            let w = d.name.len().max(6);
            let _ = write!(header, "  {:>w$}", d.name);
            let _ = write!(row, "  {:>w$.2}", d.spearman * 100.0);
        }
        let _ = write!(header, "  {:>6}", "Avg.");
        match self.average {
            Some(a) => {
                let _ = write!(row, "  {:>6.2}", a * 100.0);
            }
            None => {
                let _ = write!(row, "  {:>6}", "n/a");
            }
        }
        let mut out = format!("{header}\n{row}\n");
        for e in &self.excluded {
            let _ = writeln!(out, "excluded {}: {}", e.name, e.error);
        }
        out
    }
}

/// In-memory named dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedSts {
    pub name: String,
    pub examples: Vec<StsExample>,
}

pub fn evaluate_sts(
    model: &ProjectionModel,
    backend: &dyn EmbeddingBackend,
    datasets: &[NamedSts],
) -> Result<EvalReport, EvalError> {
    let mut scores = Vec::new();
    for ds in datasets {
        scores.push(DatasetScore {
            name: ds.name.clone(),
            spearman: score_examples(model, backend, &ds.examples)?,
            pairs: ds.examples.len(),
        });
    }
    Ok(EvalReport::from_scores(scores, Vec::new()))
}

/// A named dataset made of one or more TSV files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StsSource {
    pub name: String,
    pub paths: Vec<PathBuf>,
}

/// Evaluates file-backed datasets. Parse or scoring errors exclude only the
/// affected dataset, which is listed in [`EvalReport::excluded`].
pub fn evaluate_sts_files(
    model: &ProjectionModel,
    backend: &dyn EmbeddingBackend,
    sources: &[StsSource],
    mapping: &ColumnMapping,
    aggregation: Aggregation,
) -> EvalReport {
    let mut scores = Vec::new();
    let mut excluded = Vec::new();
    for source in sources {
        let outcome = (|| -> Result<DatasetScore, EvalError> {
            let mut files = Vec::new();
            for path in &source.paths {
                let file = std::fs::File::open(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
                let examples = read_sts(std::io::BufReader::new(file), mapping).map_err(|e| match e {
                    EvalError::Parse { line, message } => EvalError::Parse {
                        line,
                        message: format!("{}: {message}", path.display()),
                    },
                    other => other,
                })?;
                files.push(examples);
            }
            let pairs = files.iter().map(Vec::len).sum();
            let spearman = match aggregation {
                Aggregation::Pooled => score_examples(model, backend, &files.concat())?,
                Aggregation::PerFileMean => {
                    let per_file = files
                        .iter()
                        .map(|f| score_examples(model, backend, f))
                        .collect::<Result<Vec<_>, _>>()?;
                    per_file.iter().sum::<f64>() / per_file.len() as f64
                }
            };
            Ok(DatasetScore {
                name: source.name.clone(),
                spearman,
                pairs,
            })
        })();
        match outcome {
            Ok(score) => scores.push(score),
            Err(e) => excluded.push(ExcludedDataset {
                name: source.name.clone(),
                error: e.to_string(),
            }),
        }
    }
    EvalReport::from_scores(scores, excluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_cases() {
        let v = [0.3, -2.0, 5.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        assert!((cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - 0.974_631_846_197_075_8).abs() < 1e-9);
        assert!((expected - 0.974_631_846_197_075_8).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap_err(), EvalError::ZeroVector);
        assert_eq!(
            cosine(&[1.0], &[1.0, 2.0]).unwrap_err(),
            EvalError::DimensionMismatch(1, 2)
        );
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(average_ranks(&[1.0, 1.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn spearman_extremes_and_errors() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 1.5).collect();
        assert!((spearman(&xs, &xs).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = xs.iter().rev().copied().collect();
        assert!((spearman(&xs, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(spearman(&[1.0], &[2.0]), Err(EvalError::Undefined(_))));
        assert!(matches!(
            spearman(&[1.0, 1.0], &[2.0, 3.0]),
            Err(EvalError::Undefined(_))
        ));
        assert!(matches!(
            spearman(&[1.0, 2.0], &[2.0]),
            Err(EvalError::LengthMismatch(2, 1))
        ));
        assert!(matches!(
            spearman(&[1.0, f64::NAN], &[2.0, 3.0]),
            Err(EvalError::Undefined(_))
        ));
    }

    #[test]
    fn sts_parsing() {
        let text = "4.5\tA man plays.\tA person plays.\n\n0\tX\tY\n";
        let ex = read_sts(text.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].gold_score, 4.5);

        let variant = "id\ta\tb\tscore\n1\tS1\tS2\t3.0\n";
        let mapping = ColumnMapping {
            score: 3,
            sentence_a: 1,
            sentence_b: 2,
            skip_header: true,
        };
        assert_eq!(read_sts(variant.as_bytes(), &mapping).unwrap()[0].sentence_b, "S2");

        assert!(matches!(
            read_sts("x\ta\tb\n".as_bytes(), &ColumnMapping::default()),
            Err(EvalError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_sts("1.0\tonly\n".as_bytes(), &ColumnMapping::default()),
            Err(EvalError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn report_average_and_table() {
        let r = EvalReport::from_scores(
            vec![
                DatasetScore {
                    name: "STS-B".into(),
                    spearman: 1.0,
                    pairs: 3,
                },
                DatasetScore {
                    name: "SICK-R".into(),
                    spearman: 0.0,
                    pairs: 3,
                },
            ],
            vec![],
        );
        assert_eq!(r.average, Some(0.5));
        let t = r.render_table("identity");
        assert!(t.contains("100.00"));
        assert!(t.contains("50.00"));
        assert_eq!(EvalReport::from_scores(vec![], vec![]).average, None);
    }

    proptest! {
        #[test]
        fn spearman_symmetric_and_monotone_invariant(
            data in prop::collection::vec((-100i32..100, -100i32..100), 3..60)
        ) {
            let xs: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let ys: Vec<f64> = data.iter().map(|d| d.1 as f64).collect();
            prop_assume!(xs.iter().any(|&x| x != xs[0]) && ys.iter().any(|&y| y != ys[0]));
            let r = spearman(&xs, &ys).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - spearman(&ys, &xs).unwrap()).abs() < 1e-12);
            let warped: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp() + 3.0 * x).collect();
            prop_assert!((r - spearman(&warped, &ys).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn cosine_scale_and_sign(
            u in prop::collection::vec(-10.0f64..10.0, 4),
            v in prop::collection::vec(-10.0f64..10.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let base = cosine(&u, &v).unwrap();
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            let neg: Vec<f64> = u.iter().map(|x| -x).collect();
            prop_assert!((cosine(&scaled, &v).unwrap() - base).abs() < 1e-12);
            prop_assert!((cosine(&neg, &v).unwrap() + base).abs() < 1e-12);
        }
    }
}
