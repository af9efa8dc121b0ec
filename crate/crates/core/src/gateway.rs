//! Completion dispatch with bounded concurrency, retries and ordered results.
//!
//! [`dispatch`] is the shared worker pool: up to `max_concurrency` scoped
//! threads pull request indices from a shared counter, retry transient
//! failures with exponential backoff, and write each outcome into the slot of
//! its input index. The NLI classifier client reuses it.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptkit::{Relation, TemplateSet, EXCHANGE_SEPARATOR};
use crate::rng;

pub const DEFAULT_API_KEY_ENV: &str = "AUTONLI_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Retried up to the configured limit.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("malformed backend payload: {message}")]
    Protocol { message: String, raw_body: String },
    #[error("backend failure: {0}")]
    Fatal(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transient(_))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

/// Request body shape spoken by the HTTP backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireFormat {
    /// `{model, prompt, max_tokens, temperature, stop}` → `choices[0].text`
    #[default]
    Completion,
    /// Same fields with `messages` instead of `prompt` → `choices[0].message.content`
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop_sequence: Option<String>,
    pub max_concurrency: usize,
    pub retry_limit: u32,
    pub timeout_ms: u64,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub wire_format: WireFormat,
    pub api_key_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1/completions".into(),
            model_name: "llama-2-7b-chat".into(),
            max_tokens: 64,
            temperature: 0.7,
            stop_sequence: Some("\"".into()),
            max_concurrency: 8,
            retry_limit: 3,
            timeout_ms: 60_000,
            backoff_base_ms: 250,
            backoff_cap_ms: 10_000,
            wire_format: WireFormat::Completion,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_concurrency == 0 {
            return Err(GatewayError::InvalidConfig("max_concurrency must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidConfig(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidConfig("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    pub fn policy(&self) -> DispatchPolicy {
        DispatchPolicy {
            max_concurrency: self.max_concurrency,
            retry_limit: self.retry_limit,
            backoff_base: Duration::from_millis(self.backoff_base_ms),
            backoff_cap: Duration::from_millis(self.backoff_cap_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchPolicy {
    pub max_concurrency: usize,
    pub retry_limit: u32,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
}

impl DispatchPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.backoff_base.saturating_mul(factor).min(self.backoff_cap)
    }
}

impl Default for DispatchPolicy {
    fn default() -> Self {
        BackendConfig::default().policy()
    }
}

type Slot<O> = Option<Result<Attempted<O>, RequestFailure>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Attempted<T> {
    pub index: usize,
    pub value: T,
    pub latency: Duration,
    pub attempts: u32,
}

/// A request that exhausted its retries or hit a non-retryable error.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("request {request_index} failed after {attempt_count} attempt(s): {error}")]
pub struct RequestFailure {
    pub request_index: usize,
    pub attempt_count: u32,
    pub error: BackendError,
}

/// Runs `call` once per item on a bounded worker pool.
///
/// Output position `i` always holds the outcome for `items[i]`. With
/// `max_concurrency == 1` items are called strictly in input order.
pub fn dispatch<I, O, F>(items: &[I], policy: &DispatchPolicy, call: F) -> Vec<Result<Attempted<O>, RequestFailure>>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> Result<O, BackendError> + Sync,
{
    let workers = policy.max_concurrency.max(1).min(items.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Slot<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());

    let run_one = |index: usize| {
        let start = Instant::now();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match call(index, &items[index]) {
                Ok(value) => {
                    return Ok(Attempted {
                        index,
                        value,
                        latency: start.elapsed(),
                        attempts,
                    })
                }
                Err(err) if err.is_retryable() && attempts <= policy.retry_limit => {
                    std::thread::sleep(policy.backoff(attempts));
                }
                Err(error) => {
                    return Err(RequestFailure {
                        request_index: index,
                        attempt_count: attempts,
                        error,
                    })
                }
            }
        }
    };

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= items.len() {
                    break;
                }
                let outcome = run_one(index);
                slots.lock().expect("slot lock poisoned")[index] = Some(outcome);
            });
        }
    });

    slots
        .into_inner()
        .expect("slot lock poisoned")
        .into_iter()
        .map(|slot| slot.expect("every index is processed"))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub index: usize,
    pub prompt: &'a str,
    pub model: &'a str,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Option<&'a str>,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError>;

    /// Name recorded in provenance and run manifests.
    fn identity(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendResponse {
    pub request_index: usize,
    pub completion_text: String,
    #[serde(skip)]
    pub latency: Duration,
    pub attempt_count: u32,
}

pub type ResponseRecord = Result<BackendResponse, RequestFailure>;

/// Sends every prompt through `backend`, returning one record per prompt in input order.
pub fn complete_batch<P>(
    backend: &dyn CompletionBackend,
    prompts: &[P],
    cfg: &BackendConfig,
) -> Result<Vec<ResponseRecord>, GatewayError>
where
    P: AsRef<str> + Sync,
{
    cfg.validate()?;
    let records = dispatch(prompts, &cfg.policy(), |index, prompt| {
        backend.complete(&CompletionRequest {
            index,
            prompt: prompt.as_ref(),
            model: &cfg.model_name,
            max_tokens: cfg.max_tokens,
            temperature: cfg.temperature,
            stop: cfg.stop_sequence.as_deref(),
        })
    });
    Ok(records
        .into_iter()
        .map(|r| {
            r.map(|a| BackendResponse {
                request_index: a.index,
                completion_text: a.value,
                latency: a.latency,
                attempt_count: a.attempts,
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: usize,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempts: u32,
}

/// Writes one JSON line per request. Latencies are omitted so transcripts of
/// deterministic backends are reproducible.
pub fn write_transcript<W: Write, P: AsRef<str>>(
    mut writer: W,
    prompts: &[P],
    records: &[ResponseRecord],
) -> std::io::Result<()> {
    for (prompt, record) in prompts.iter().zip(records) {
        let entry = match record {
            Ok(r) => TranscriptEntry {
                index: r.request_index,
                prompt: prompt.as_ref().to_owned(),
                completion: Some(r.completion_text.clone()),
                error: None,
                attempts: r.attempt_count,
            },
            Err(f) => TranscriptEntry {
                index: f.request_index,
                prompt: prompt.as_ref().to_owned(),
                completion: None,
                error: Some(f.error.to_string()),
                attempts: f.attempt_count,
            },
        };
        serde_json::to_writer(&mut writer, &entry)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

/// Answers prompts from a recorded transcript.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    answers: BTreeMap<String, String>,
}

impl ReplayBackend {
    pub fn from_transcript<R: BufRead>(reader: R) -> std::io::Result<Self> {
        let mut answers = BTreeMap::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(&line)?;
            if let Some(c) = entry.completion {
                answers.entry(entry.prompt).or_insert(c);
            }
        }
        Ok(Self { answers })
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        self.answers
            .get(request.prompt)
            .cloned()
            .ok_or_else(|| BackendError::Fatal(format!("prompt {} not in transcript", request.index)))
    }

    fn identity(&self) -> String {
        "replay".into()
    }
}

/// Completion endpoint over HTTP JSON.
pub struct HttpCompletionBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    wire_format: WireFormat,
    model: String,
}

impl HttpCompletionBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        Ok(Self {
            agent: http_agent(Duration::from_millis(cfg.timeout_ms)),
            endpoint: cfg.endpoint_url.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
            wire_format: cfg.wire_format,
            model: cfg.model_name.clone(),
        })
    }

    fn parse(&self, body: &str, stop: Option<&str>) -> Result<String, BackendError> {
        let protocol = |message: &str| BackendError::Protocol {
            message: message.to_owned(),
            raw_body: body.to_owned(),
        };
        let value: serde_json::Value = serde_json::from_str(body).map_err(|e| protocol(&e.to_string()))?;
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| protocol("missing choices[0]"))?;
        let text = match self.wire_format {
            WireFormat::Completion => choice.get("text"),
            WireFormat::Chat => choice.get("message").and_then(|m| m.get("content")),
        }
        .and_then(|t| t.as_str())
        .ok_or_else(|| protocol("missing completion text"))?;
        let mut text = text.to_owned();
        // Servers strip the matched stop sequence; restore it so the
        // extraction step still sees the closing delimiter.
        if let Some(stop) = stop {
            let stopped = choice.get("finish_reason").and_then(|f| f.as_str()) == Some("stop");
            if stopped && !text.contains(stop) {
                text.push_str(stop);
            }
        }
        Ok(text)
    }
}

pub(crate) fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .new_agent()
}

/// POSTs `body` and classifies the outcome into retryable and terminal errors.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
) -> Result<String, BackendError> {
    let mut request = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        request = request.header("Authorization", format!("Bearer {key}"));
    }
    let mut response = request
        .send_json(body)
        .map_err(|e| BackendError::Transient(e.to_string()))?;
    let status = response.status().as_u16();
    let text = response
        .body_mut()
        .read_to_string()
        .map_err(|e| BackendError::Transient(e.to_string()))?;
    match status {
        200..=299 => Ok(text),
        429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}: {text}"))),
        _ => Err(BackendError::Fatal(format!("HTTP {status}: {text}"))),
    }
}

impl CompletionBackend for HttpCompletionBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let mut body = serde_json::json!({
            "model": request.model,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        match self.wire_format {
            WireFormat::Completion => body["prompt"] = request.prompt.into(),
            WireFormat::Chat => {
                body["messages"] = serde_json::json!([{ "role": "user", "content": request.prompt }]);
            }
        }
        if let Some(stop) = request.stop {
            body["stop"] = serde_json::json!([stop]);
        }
        let raw = post_json(&self.agent, &self.endpoint, self.api_key.as_deref(), &body)?;
        self.parse(&raw, request.stop)
    }

    fn identity(&self) -> String {
        format!("http:{}@{}", self.model, self.endpoint)
    }
}

/// Matches prompts whose final exchange contains `pattern`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockRule {
    pattern: String,
    relation: Option<Relation>,
    completion: String,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, completion: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            relation: None,
            completion: completion.into(),
        }
    }

    /// Restricts the rule to prompts generated for `relation`.
    pub fn for_relation(mut self, relation: Relation) -> Self {
        self.relation = Some(relation);
        self
    }
}

pub type ReplyFn = Arc<dyn Fn(Relation, &str) -> String + Send + Sync>;

/// Completion used when no rule matches.
#[derive(Clone, Default)]
pub enum DefaultReply {
    /// Unmatched prompts are an error.
    #[default]
    None,
    /// A fixture hypothesis, closed with `"` and followed by junk.
    Fixed(String),
    /// Computed from the parsed `(relation, premise)` of the query.
    Generated(ReplyFn),
}

impl std::fmt::Debug for DefaultReply {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DefaultReply::None => f.write_str("None"),
            DefaultReply::Fixed(s) => f.debug_tuple("Fixed").field(s).finish(),
            DefaultReply::Generated(_) => f.write_str("Generated(..)"),
        }
    }
}

/// Deterministic, instrumented in-process backend.
#[derive(Debug, Default)]
pub struct MockBackend {
    templates: TemplateSet,
    rules: Vec<MockRule>,
    default: DefaultReply,
    faults: BTreeMap<usize, u32>,
    delay: Option<(Duration, u64)>,
    in_flight_limit: Option<usize>,
    attempts: Mutex<BTreeMap<usize, u32>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    violations: AtomicUsize,
    call_log: Mutex<Vec<usize>>,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self {
            rules,
            ..Self::default()
        }
    }

    pub fn with_default(mut self, default: DefaultReply) -> Self {
        self.default = default;
        self
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    /// The first `times` attempts for request `index` fail transiently.
    pub fn fail_times(mut self, index: usize, times: u32) -> Self {
        self.faults.insert(index, times);
        self
    }

    /// Every attempt for request `index` fails transiently.
    pub fn fail_always(self, index: usize) -> Self {
        self.fail_times(index, u32::MAX)
    }

    /// Sleeps a pseudo-random duration in `[0, max]` per attempt, derived from `seed`.
    pub fn with_random_delays(mut self, max: Duration, seed: u64) -> Self {
        self.delay = Some((max, seed));
        self
    }

    /// Calls made while more than `limit` requests are in flight are rejected and counted.
    pub fn expect_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight_limit = Some(limit);
        self
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn violations(&self) -> usize {
        self.violations.load(Ordering::SeqCst)
    }

    /// Request indices in arrival order, one entry per attempt.
    pub fn call_log(&self) -> Vec<usize> {
        self.call_log.lock().expect("call log poisoned").clone()
    }

    pub fn attempts_for(&self, index: usize) -> u32 {
        self.attempts
            .lock()
            .expect("attempts poisoned")
            .get(&index)
            .copied()
            .unwrap_or(0)
    }

    fn reply(&self, prompt: &str) -> Result<String, BackendError> {
        let query = prompt.rsplit(EXCHANGE_SEPARATOR).next().unwrap_or(prompt);
        let parsed = self.templates.parse_query(prompt);
        for rule in &self.rules {
            let relation_ok = match rule.relation {
                None => true,
                Some(r) => parsed.map(|(rel, _)| rel) == Some(r),
            };
            if relation_ok && query.contains(&rule.pattern) {
                return Ok(rule.completion.clone());
            }
        }
        match &self.default {
            DefaultReply::None => Err(BackendError::Fatal("no mock rule matches the prompt".into())),
            DefaultReply::Fixed(h) => Ok(format!("{h}\" (mock)")),
            DefaultReply::Generated(f) => parsed
                .map(|(rel, premise)| f(rel, premise))
                .ok_or_else(|| BackendError::Fatal("mock could not parse the query premise".into())),
        }
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        self.call_log.lock().expect("call log poisoned").push(request.index);
        let attempt = {
            let mut attempts = self.attempts.lock().expect("attempts poisoned");
            let a = attempts.entry(request.index).or_insert(0);
            *a += 1;
            *a
        };
        if let Some(limit) = self.in_flight_limit {
            if now > limit {
                self.violations.fetch_add(1, Ordering::SeqCst);
                return Err(BackendError::Fatal(format!("{now} requests in flight, limit {limit}")));
            }
        }
        if let Some((max, seed)) = self.delay {
            let key = rng::derive_seed(seed, &format!("{}:{}", request.index, attempt));
            let nanos = max.as_nanos() as u64;
            if nanos > 0 {
                std::thread::sleep(Duration::from_nanos(key % (nanos + 1)));
            }
        }
        if let Some(&fail) = self.faults.get(&request.index) {
            if attempt <= fail {
                return Err(BackendError::Transient(format!(
                    "injected fault for request {} (attempt {attempt})",
                    request.index
                )));
            }
        }
        self.reply(request.prompt)
    }

    fn identity(&self) -> String {
        "mock".into()
    }
}
