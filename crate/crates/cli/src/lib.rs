//! Command-line front end: corpus preparation, generation, merging, NLI
//! scoring, projection training and STS evaluation.

pub mod config;
pub mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use autonli::corpus::{
    filter_premises, read_corpus, sample_premises, write_corpus, LengthFilter, PremiseSentence, WhitespaceCounter,
};
use autonli::dataset::{
    dataset_stats, interleave, merge, pairs_to_triples, read_pairs, take_schedule_slice, write_pairs, GenerationStats,
    NliPair,
};
use autonli::evaluator::{evaluate_sts_files, write_sts, Aggregation, ColumnMapping, StsSource};
use autonli::fewshot::{read_pool, FewShotStrategy};
use autonli::gateway::{
    write_transcript, CompletionBackend, DefaultReply, HttpCompletionBackend, MockBackend, ReplayBackend,
};
use autonli::generation::{generate, GenerationPlan};
use autonli::promptkit::{ExtractionPolicy, TemplateSet};
use autonli::quality::{
    agreement_ratio, classify_dataset, render_agreement_table, sample_per_label, ClassifierBackend, HttpClassifier,
    OracleClassifier,
};
use autonli::rng::derive_seed;
use autonli::synthetic::{echo_reply, SyntheticWorld};
use autonli::trainer::{train, write_log_csv, ProjectionModel};

use config::{EmbedderKind, RunConfig};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "autonli",
    version,
    about = "Few-shot NLI data generation and sentence-embedding training"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every random component derives its own seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Timestamp recorded in provenance and manifests (RFC 3339 or Unix seconds).
    /// Falls back to SOURCE_DATE_EPOCH, then the current time.
    #[arg(long, global = true)]
    pub timestamp: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter or sample a one-sentence-per-line corpus.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Write files from the built-in synthetic world.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Generate entailment and contradiction hypotheses for every premise.
    Generate(GenerateArgs),
    /// Combine datasets, removing exact duplicates.
    Merge(MergeArgs),
    /// Score a dataset with an NLI classifier and report agreement ratios.
    EvalNli(EvalNliArgs),
    /// Train a projection head on premise/entailment/contradiction triples.
    Train(TrainArgs),
    /// Evaluate a projection on STS datasets.
    EvalSts(EvalStsArgs),
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
    /// Validate every record of a dataset.
    Check(CheckArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        min_tokens: Option<usize>,
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        n: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Premise sentences, one per line.
    Corpus {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Few-shot pool as JSONL.
    Pool {
        #[arg(long)]
        per_relation: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// STS pairs as `score \t a \t b`.
    Sts {
        #[arg(long)]
        n: usize,
        /// Distinguishes independent splits, e.g. `dev` and `test`.
        #[arg(long)]
        label: String,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// HTTP completion endpoint from the config file.
    Http,
    /// In-process backend echoing the synthetic world's hypotheses.
    Mock,
    /// Answers from a previous run's transcript.
    Replay,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSONL few-shot pool; not needed for 0shot.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// e.g. 0shot, 5shot, 20shot, 1x5, 5x4.
    #[arg(long, default_value = "0shot")]
    pub strategy: FewShotStrategy,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "http")]
    pub backend: BackendKind,
    /// Transcript for `--backend replay`.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// TOML with `entailment` / `contradiction` template overrides.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "drop")]
    pub extraction: ExtractionArg,
    #[arg(long)]
    pub max_concurrency: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtractionArg {
    Drop,
    RetryOnce,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Round-robin across inputs instead of concatenating.
    #[arg(long)]
    pub interleave: bool,
}

#[derive(Debug, Args)]
pub struct EvalNliArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `oracle` (lexical rules) or an HTTP classifier URL.
    #[arg(long, default_value = "oracle")]
    pub classifier: String,
    /// Score a seeded sample of at most this many pairs per label.
    #[arg(long)]
    pub per_label: Option<usize>,
    /// Row label in the printed table.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// STS dev set used for checkpoint selection.
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the first `4000 * 2^n` records.
    #[arg(long, conflicts_with = "records")]
    pub exponent: Option<u32>,
    /// Use the first `records` records.
    #[arg(long)]
    pub records: Option<usize>,
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalStsArgs {
    /// `NAME=PATH[,PATH...]`; repeat for several datasets.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<String>,
    /// Projection checkpoint; the identity map when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderKind>,
    #[arg(long, value_enum, default_value = "pooled")]
    pub aggregation: AggregationArg,
    /// Zero-based `score,a,b` column positions.
    #[arg(long)]
    pub columns: Option<String>,
    #[arg(long)]
    pub skip_header: bool,
    #[arg(long, default_value = "model")]
    pub model_label: String,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Pooled,
    PerFileMean,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `generation_stats.json` from the generating run.
    #[arg(long)]
    pub generation_stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub data: PathBuf,
}

/// Distinguishes bad invocations (exit 1) from failed runs (exit 2).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

struct RunContext {
    cfg: RunConfig,
    seed: u64,
    timestamp: String,
}

impl RunContext {
    fn manifest(&self) -> RunManifest {
        RunManifest::new(
            self.seed,
            self.timestamp.clone(),
            serde_json::to_value(&self.cfg).unwrap_or(serde_json::Value::Null),
        )
    }
}

fn resolve_timestamp(flag: Option<&str>) -> Result<String, CliError> {
    let parse = |s: &str| -> Result<String, CliError> {
        if let Ok(secs) = s.trim().parse::<u64>() {
            return Ok(humantime::format_rfc3339_seconds(UNIX_EPOCH + Duration::from_secs(secs)).to_string());
        }
        humantime::parse_rfc3339_weak(s.trim())
            .map(|t| humantime::format_rfc3339_seconds(t).to_string())
            .map_err(|e| CliError::Usage(format!("bad timestamp {s:?}: {e}")))
    };
    if let Some(s) = flag {
        return parse(s);
    }
    if let Ok(s) = std::env::var("SOURCE_DATE_EPOCH") {
        return parse(&s);
    }
    Ok(humantime::format_rfc3339_seconds(SystemTime::now()).to_string())
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_pairs(path: &Path) -> anyhow::Result<Vec<NliPair>> {
    read_pairs(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn save_pairs(path: &Path, pairs: &[NliPair]) -> anyhow::Result<()> {
    write_pairs(create(path)?, pairs).with_context(|| format!("writing {}", path.display()))
}

fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Parses arguments and runs the selected command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref()).map_err(|e| CliError::Usage(format!("{e:#}")))?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let timestamp = resolve_timestamp(cli.timestamp.as_deref())?;
    let mut ctx = RunContext { cfg, seed, timestamp };
    ctx.cfg.seed = Some(seed);
    match cli.command {
        Command::Corpus(c) => corpus_cmd(&ctx, c),
        Command::Synth(c) => synth_cmd(&ctx, c),
        Command::Generate(a) => generate_cmd(&mut ctx, a),
        Command::Merge(a) => merge_cmd(&ctx, a),
        Command::EvalNli(a) => eval_nli_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&mut ctx, a),
        Command::EvalSts(a) => eval_sts_cmd(&mut ctx, a),
        Command::Stats(a) => stats_cmd(a),
        Command::Check(a) => check_cmd(a),
    }
}

fn corpus_cmd(ctx: &RunContext, cmd: CorpusCommand) -> Result<(), CliError> {
    match cmd {
        CorpusCommand::Filter {
            input,
            output,
            min_tokens,
            max_tokens,
        } => {
            let filter = LengthFilter::new(
                min_tokens.unwrap_or(ctx.cfg.filter.min_tokens),
                max_tokens.unwrap_or(ctx.cfg.filter.max_tokens),
            )
            .map_err(|e| CliError::Usage(e.to_string()))?;
            let corpus = read_corpus(open(&input)?, &WhitespaceCounter).map_err(anyhow::Error::from)?;
            let kept = filter_premises(&corpus, &filter);
            write_corpus(create(&output)?, &kept).map_err(anyhow::Error::from)?;
            eprintln!("kept {} of {} sentences", kept.len(), corpus.len());
        }
        CorpusCommand::Sample { input, output, n } => {
            let corpus = read_corpus(open(&input)?, &WhitespaceCounter).map_err(anyhow::Error::from)?;
            let sample = sample_premises(&corpus, n, derive_seed(ctx.seed, "sample")).map_err(anyhow::Error::from)?;
            write_corpus(create(&output)?, &sample).map_err(anyhow::Error::from)?;
        }
    }
    Ok(())
}

fn synth_cmd(ctx: &RunContext, cmd: SynthCommand) -> Result<(), CliError> {
    let world = SyntheticWorld::new(derive_seed(ctx.seed, "world"));
    match cmd {
        SynthCommand::Corpus { n, output } => {
            let mut w = create(&output)?;
            for s in world.premises(n, "corpus") {
                writeln!(w, "{s}").map_err(anyhow::Error::from)?;
            }
            w.flush().map_err(anyhow::Error::from)?;
        }
        SynthCommand::Pool { per_relation, output } => {
            let mut w = create(&output)?;
            for ex in world.fewshot_pool(per_relation) {
                serde_json::to_writer(&mut w, &ex).map_err(anyhow::Error::from)?;
                w.write_all(b"\n").map_err(anyhow::Error::from)?;
            }
            w.flush().map_err(anyhow::Error::from)?;
        }
        SynthCommand::Sts { n, label, output } => {
            write_sts(create(&output)?, &world.sts(n, &label)).map_err(anyhow::Error::from)?;
        }
    }
    Ok(())
}

fn generate_cmd(ctx: &mut RunContext, args: GenerateArgs) -> Result<(), CliError> {
    if let Some(n) = args.max_concurrency {
        ctx.cfg.backend.max_concurrency = n;
    }
    ctx.cfg.backend.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let templates = match &args.templates {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TemplateSet::from_overrides(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => TemplateSet::default(),
    };
    let filter = LengthFilter::new(ctx.cfg.filter.min_tokens, ctx.cfg.filter.max_tokens)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = read_corpus(open(&args.corpus)?, &WhitespaceCounter).map_err(anyhow::Error::from)?;
    let premises: Vec<PremiseSentence> = filter_premises(&corpus, &filter);
    let pool = match &args.pool {
        Some(path) => read_pool(open(path)?).with_context(|| format!("reading {}", path.display()))?,
        None if args.strategy.is_zero_shot() => Vec::new(),
        None => {
            return Err(CliError::Usage(format!(
                "--pool is required for strategy {}",
                args.strategy
            )))
        }
    };

    let backend: Box<dyn CompletionBackend> = match args.backend {
        BackendKind::Http => Box::new(HttpCompletionBackend::new(&ctx.cfg.backend).map_err(anyhow::Error::from)?),
        BackendKind::Mock => Box::new(
            MockBackend::new(Vec::new())
                .with_templates(templates.clone())
                .with_default(DefaultReply::Generated(echo_reply())),
        ),
        BackendKind::Replay => {
            let path = args
                .transcript
                .as_ref()
                .ok_or_else(|| CliError::Usage("--transcript is required for --backend replay".into()))?;
            Box::new(
                ReplayBackend::from_transcript(open(path)?).with_context(|| format!("reading {}", path.display()))?,
            )
        }
    };

    let plan = GenerationPlan {
        strategy: args.strategy,
        seed: ctx.seed,
        extraction: match args.extraction {
            ExtractionArg::Drop => ExtractionPolicy::Drop,
            ExtractionArg::RetryOnce => ExtractionPolicy::RetryOnce,
        },
        timestamp: ctx.timestamp.clone(),
    };
    let out = generate(&premises, &pool, &templates, backend.as_ref(), &ctx.cfg.backend, &plan)
        .map_err(anyhow::Error::from)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = ctx.manifest();
    manifest.backend = Some(out.backend.clone());
    manifest.input(&args.corpus)?;
    if let Some(p) = &args.pool {
        manifest.input(p)?;
    }
    if let Some(p) = &args.templates {
        manifest.input(p)?;
    }
    if out.per_set.len() > 1 {
        for (i, set) in out.per_set.iter().enumerate() {
            let path = args.out.join(format!("set-{i}.jsonl"));
            save_pairs(&path, set)?;
            manifest.output(&path)?;
        }
    }
    let merged_path = args.out.join("merged.jsonl");
    save_pairs(&merged_path, &out.merged)?;
    manifest.output(&merged_path)?;

    let stats_path = args.out.join("generation_stats.json");
    write_json(&stats_path, &out.stats)?;
    manifest.output(&stats_path)?;

    let transcript_path = args.out.join("transcript.jsonl");
    let mut w = create(&transcript_path)?;
    write_transcript(&mut w, &out.prompts, &out.responses).map_err(anyhow::Error::from)?;
    let (retry_prompts, retry_records): (Vec<&str>, Vec<_>) = out
        .retries
        .iter()
        .map(|(i, r)| (out.prompts[*i].text.as_str(), r.clone()))
        .unzip();
    write_transcript(&mut w, &retry_prompts, &retry_records).map_err(anyhow::Error::from)?;
    drop(w);
    manifest.output(&transcript_path)?;
    manifest.write(&args.out.join("manifest.json"))?;

    eprintln!(
        "{} prompts, {} pairs, {} backend failures, {} extraction failures",
        out.stats.prompts, out.stats.pairs, out.stats.backend_failures, out.stats.extraction_failures
    );
    Ok(())
}

fn merge_cmd(ctx: &RunContext, args: MergeArgs) -> Result<(), CliError> {
    let datasets = args
        .inputs
        .iter()
        .map(|p| load_pairs(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let merged = if args.interleave {
        interleave(&datasets)
    } else {
        merge(&datasets)
    };
    save_pairs(&args.output, &merged)?;
    let mut manifest = ctx.manifest();
    for p in &args.inputs {
        manifest.input(p)?;
    }
    manifest.output(&args.output)?;
    manifest.write(&manifest_path_for(&args.output))?;
    eprintln!("{} records", merged.len());
    Ok(())
}

fn eval_nli_cmd(ctx: &RunContext, args: EvalNliArgs) -> Result<(), CliError> {
    let mut pairs = load_pairs(&args.data)?;
    if let Some(n) = args.per_label {
        pairs = sample_per_label(&pairs, n, derive_seed(ctx.seed, "eval-nli"));
    }
    let classifier: Box<dyn ClassifierBackend> = if args.classifier == "oracle" {
        Box::new(OracleClassifier::heuristic())
    } else if args.classifier.starts_with("http://") || args.classifier.starts_with("https://") {
        Box::new(HttpClassifier::new(
            args.classifier.clone(),
            Duration::from_millis(ctx.cfg.backend.timeout_ms),
        ))
    } else {
        return Err(CliError::Usage(format!(
            "unknown classifier {:?}; use `oracle` or an http(s) URL",
            args.classifier
        )));
    };
    let verdicts = classify_dataset(&pairs, classifier.as_ref(), &ctx.cfg.backend.policy());
    let report = agreement_ratio(&pairs, &verdicts).map_err(anyhow::Error::from)?;
    let label = args.label.clone().unwrap_or_else(|| {
        args.data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    print!("{}", render_agreement_table(&[(label.as_str(), &report)]));
    if let Some(output) = &args.output {
        write_json(
            output,
            &serde_json::json!({
                "dataset": label,
                "classifier": classifier.identity(),
                "pairs": pairs.len(),
                "report": report,
            }),
        )?;
        let mut manifest = ctx.manifest();
        manifest.backend = Some(classifier.identity());
        manifest.input(&args.data)?;
        manifest.output(output)?;
        manifest.write(&manifest_path_for(output))?;
    }
    if report.classified() == 0 && !pairs.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("classifier failed on every pair")));
    }
    Ok(())
}

fn parse_columns(spec: Option<&str>, skip_header: bool) -> Result<ColumnMapping, CliError> {
    let mut mapping = ColumnMapping {
        skip_header,
        ..ColumnMapping::default()
    };
    if let Some(spec) = spec {
        let cols: Vec<usize> = spec
            .split(',')
            .map(|c| c.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("bad --columns {spec:?}")))?;
        let [score, a, b] = cols[..] else {
            return Err(CliError::Usage(format!(
                "--columns needs three positions, got {spec:?}"
            )));
        };
        mapping.score = score;
        mapping.sentence_a = a;
        mapping.sentence_b = b;
    }
    Ok(mapping)
}

fn train_cmd(ctx: &mut RunContext, args: TrainArgs) -> Result<(), CliError> {
    let t = &mut ctx.cfg.train;
    if let Some(v) = args.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.temperature {
        t.temperature = v;
    }
    if let Some(v) = args.warmup_fraction {
        t.warmup_fraction = v;
    }
    if args.eval_every.is_some() {
        t.eval_every_steps = args.eval_every;
    }
    t.seed = derive_seed(ctx.seed, "train");
    t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(kind) = args.embedder {
        ctx.cfg.embedder.kind = kind;
    }

    let pairs = load_pairs(&args.data)?;
    let slice = match (args.exponent, args.records) {
        (Some(n), _) => take_schedule_slice(&pairs, n).map_err(anyhow::Error::from)?,
        (None, Some(r)) => {
            if r > pairs.len() {
                bail_runtime(format!("--records {r} exceeds the {} available", pairs.len()))?;
            }
            pairs[..r].to_vec()
        }
        (None, None) => pairs,
    };
    let join = pairs_to_triples(&slice);
    let dev = autonli::evaluator::read_sts(open(&args.dev)?, &ColumnMapping::default())
        .with_context(|| format!("reading {}", args.dev.display()))?;
    let embedder = ctx.cfg.embedder.build(ctx.seed)?;
    let outcome = train(&join.triples, &dev, embedder.as_ref(), &ctx.cfg.train).map_err(anyhow::Error::from)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let checkpoint = args.out.join("checkpoint.bin");
    let mut w = create(&checkpoint)?;
    outcome
        .best_model
        .write_checkpoint(&mut w)
        .map_err(anyhow::Error::from)?;
    drop(w);
    let log_path = args.out.join("train_log.csv");
    write_log_csv(create(&log_path)?, &outcome.log).map_err(anyhow::Error::from)?;
    let summary_path = args.out.join("train_summary.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "records": slice.len(),
            "triples": join.triples.len(),
            "dropped_premises": join.dropped,
            "embedder": embedder.identity(),
            "embedding_dim": outcome.embedding_dim,
            "total_steps": outcome.total_steps,
            "eval_every": outcome.eval_every,
            "best_step": outcome.best_step,
            "best_dev_spearman": outcome.best_dev_spearman,
            "baseline_dev_spearman": outcome.log[0].dev_spearman,
        }),
    )?;

    let mut manifest = ctx.manifest();
    manifest.backend = Some(embedder.identity());
    manifest.input(&args.data)?;
    manifest.input(&args.dev)?;
    for p in [&checkpoint, &log_path, &summary_path] {
        manifest.output(p)?;
    }
    manifest.write(&args.out.join("manifest.json"))?;
    eprintln!(
        "{} triples, {} steps, best dev Spearman {:.4} at step {}",
        join.triples.len(),
        outcome.total_steps,
        outcome.best_dev_spearman,
        outcome.best_step
    );
    Ok(())
}

fn bail_runtime(message: String) -> Result<(), CliError> {
    Err(CliError::Runtime(anyhow::anyhow!(message)))
}

fn eval_sts_cmd(ctx: &mut RunContext, args: EvalStsArgs) -> Result<(), CliError> {
    if let Some(kind) = args.embedder {
        ctx.cfg.embedder.kind = kind;
    }
    let mapping = parse_columns(args.columns.as_deref(), args.skip_header)?;
    let mut sources = Vec::new();
    for spec in &args.datasets {
        let Some((name, paths)) = spec.split_once('=') else {
            return Err(CliError::Usage(format!(
                "--dataset expects NAME=PATH[,PATH], got {spec:?}"
            )));
        };
        let paths: Vec<PathBuf> = paths.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
        if name.is_empty() || paths.is_empty() {
            return Err(CliError::Usage(format!(
                "--dataset expects NAME=PATH[,PATH], got {spec:?}"
            )));
        }
        sources.push(StsSource {
            name: name.to_owned(),
            paths,
        });
    }
    let embedder = ctx.cfg.embedder.build(ctx.seed)?;
    let model = match &args.checkpoint {
        Some(path) => {
            ProjectionModel::read_checkpoint(open(path)?).with_context(|| format!("reading {}", path.display()))?
        }
        None => {
            let probe = embedder
                .embed(&["probe"])
                .map_err(|e| anyhow::anyhow!("embedding probe failed: {e}"))?;
            ProjectionModel::identity(probe.first().map_or(0, Vec::len))
        }
    };
    let aggregation = match args.aggregation {
        AggregationArg::Pooled => Aggregation::Pooled,
        AggregationArg::PerFileMean => Aggregation::PerFileMean,
    };
    let report = evaluate_sts_files(&model, embedder.as_ref(), &sources, &mapping, aggregation);
    print!("{}", report.render_table(&args.model_label));
    if let Some(output) = &args.output {
        write_json(output, &report)?;
        let mut manifest = ctx.manifest();
        manifest.backend = Some(embedder.identity());
        if let Some(c) = &args.checkpoint {
            manifest.input(c)?;
        }
        for s in &sources {
            for p in &s.paths {
                if p.exists() {
                    manifest.input(p)?;
                }
            }
        }
        manifest.output(output)?;
        manifest.write(&manifest_path_for(output))?;
    }
    if report.per_dataset.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("every dataset was excluded")));
    }
    Ok(())
}

fn stats_cmd(args: StatsArgs) -> Result<(), CliError> {
    let pairs = load_pairs(&args.data)?;
    let generation: Option<GenerationStats> = match &args.generation_stats {
        Some(p) => Some(serde_json::from_reader(open(p)?).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let stats = dataset_stats(&pairs, generation);
    println!("{}", serde_json::to_string_pretty(&stats).map_err(anyhow::Error::from)?);
    Ok(())
}

fn check_cmd(args: CheckArgs) -> Result<(), CliError> {
    let (valid, errors) = autonli::dataset::check_pairs(open(&args.data)?).map_err(anyhow::Error::from)?;
    for e in &errors {
        eprintln!("{e}");
    }
    println!("{valid} valid, {} invalid", errors.len());
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!("{} invalid records", errors.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        let err = run(["autonli", "generate", "--strategy", "7y"]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let err = run(["autonli", "no-such-command"]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn timestamps() {
        assert_eq!(resolve_timestamp(Some("0")).unwrap(), "1970-01-01T00:00:00Z");
        assert_eq!(
            resolve_timestamp(Some("2023-11-01T10:00:00Z")).unwrap(),
            "2023-11-01T10:00:00Z"
        );
        assert!(resolve_timestamp(Some("yesterday")).is_err());
    }

    #[test]
    fn column_specs() {
        let m = parse_columns(Some("3,1,2"), true).unwrap();
        assert_eq!((m.score, m.sentence_a, m.sentence_b, m.skip_header), (3, 1, 2, true));
        assert!(parse_columns(Some("1,2"), false).is_err());
    }
}
