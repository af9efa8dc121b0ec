//! TOML run configuration. Command-line flags override file values, which
//! override built-in defaults.

use std::path::Path;
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use autonli::gateway::BackendConfig;
use autonli::rng::derive_seed;
use autonli::synthetic::BagOfWordsEmbedder;
use autonli::trainer::{EmbeddingBackend, HttpEmbeddingBackend, TrainConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub backend: BackendConfig,
    pub train: TrainConfig,
    pub embedder: EmbedderConfig,
    pub filter: FilterConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    /// Deterministic bag-of-words embeddings, no network.
    #[default]
    Synthetic,
    /// OpenAI-style embeddings endpoint.
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    /// Defaults to a value derived from the run seed.
    pub seed: Option<u64>,
    pub function_weight: f64,
    pub endpoint: String,
    pub model: String,
    pub timeout_ms: u64,
    pub api_key_env: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Synthetic,
            dim: 32,
            seed: None,
            function_weight: 2.5,
            endpoint: "http://127.0.0.1:8000/v1/embeddings".into(),
            model: "llama-2-7b-chat".into(),
            timeout_ms: 60_000,
            api_key_env: "AUTONLI_API_KEY".into(),
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self, run_seed: u64) -> anyhow::Result<Box<dyn EmbeddingBackend>> {
        Ok(match self.kind {
            EmbedderKind::Synthetic => {
                anyhow::ensure!(self.dim > 0, "embedder dim must be positive");
                let mut e =
                    BagOfWordsEmbedder::new(self.dim, self.seed.unwrap_or_else(|| derive_seed(run_seed, "embedder")));
                e.function_weight = self.function_weight;
                Box::new(e)
            }
            EmbedderKind::Http => Box::new(HttpEmbeddingBackend::new(
                self.endpoint.clone(),
                self.model.clone(),
                Duration::from_millis(self.timeout_ms),
                std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty()),
            )),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_tokens: 4,
            max_tokens: 32,
        }
    }
}
