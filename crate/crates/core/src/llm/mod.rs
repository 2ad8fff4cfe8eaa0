//! Text-model I/O: prompt templates, a cached chat gateway over pluggable
//! backends (HTTP or mock) and sentence embedders.

mod cache;
pub mod http;
mod mock;
mod template;
pub mod text;

pub use cache::{cache_key, CacheEntry, ResponseCache};
pub use http::{HttpChat, HttpClient, HttpEmbedder, RetryPolicy};
pub use mock::{FailingBackend, MockEmbedder, MockLlm};
pub use template::{render, render_item, render_list, TemplateId, UNKNOWN_PROFILE};

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::Dense;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("template {template}: missing field `{field}`")]
    MissingField { template: TemplateId, field: String },
    #[error("template {template}: unknown field `{field}`")]
    UnknownField { template: TemplateId, field: String },
    #[error("HTTP {status}: {body}")]
    Client { status: u16, body: String },
    #[error("gave up after {attempts} attempts (last status {status:?}): {last}")]
    Exhausted {
        attempts: u32,
        status: Option<u16>,
        last: String,
    },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("embedding dimension changed from {expected} to {got}")]
    DimensionDrift { expected: usize, got: usize },
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// A single user message.
    pub fn user(model: &str, prompt: &str, temperature: f32, max_tokens: u32) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![Message {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature,
            max_tokens,
        }
    }

    /// Content of the last message.
    pub fn prompt(&self) -> &str {
        self.messages.last().map_or("", |m| m.content.as_str())
    }

    fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::Config("chat request without messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::Config(format!("temperature {} < 0", self.temperature)));
        }
        Ok(())
    }

    /// Cache identity: every message, so multi-message requests do not alias.
    fn cache_prompt(&self) -> String {
        if self.messages.len() == 1 {
            return self.messages[0].content.clone();
        }
        self.messages
            .iter()
            .map(|m| format!("<{}>\n{}", m.role, m.content))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, LlmError>;

    /// Whether calls leave the process (used only for logging).
    fn is_network(&self) -> bool {
        true
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, LlmError>;
}

/// Embeds `texts` into unit rows; every row must share one dimension.
pub fn embed_texts(embedder: &dyn Embedder, texts: &[String]) -> Result<Dense, LlmError> {
    const BATCH: usize = 256;
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(BATCH) {
        rows.extend(embedder.embed(chunk)?);
    }
    if rows.len() != texts.len() {
        return Err(LlmError::Protocol(format!("{} embeddings for {} texts", rows.len(), texts.len())));
    }
    let dim = rows.first().map_or(0, Vec::len);
    for r in &mut rows {
        if r.len() != dim {
            return Err(LlmError::DimensionDrift {
                expected: dim,
                got: r.len(),
            });
        }
        let norm = r.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            r.iter_mut().for_each(|x| *x /= norm);
        }
    }
    let flat = rows.concat();
    Dense::from_vec(texts.len(), dim, flat).map_err(|e| LlmError::Protocol(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub model: String,
    pub explain_temperature: f32,
    pub recommend_temperature: f32,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub cache_path: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            explain_temperature: 0.7,
            recommend_temperature: 0.0,
            max_tokens: 512,
            max_in_flight: 4,
            cache_path: None,
            timeout_secs: 60,
        }
    }
}

/// Cache-first access to a chat backend with a call counter.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    cache: Mutex<ResponseCache>,
    calls: AtomicU64,
    config: GatewayConfig,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("calls", &self.backend_calls())
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, config: GatewayConfig) -> Result<Self, LlmError> {
        let cache = match &config.cache_path {
            Some(p) => ResponseCache::open(p)?,
            None => ResponseCache::in_memory(),
        };
        Ok(Self {
            backend,
            cache: Mutex::new(cache),
            calls: AtomicU64::new(0),
            config,
        })
    }

    pub fn mock(seed: u64, config: GatewayConfig) -> Result<Self, LlmError> {
        Self::new(Box::new(MockLlm::new(seed)), config)
    }

    /// HTTP backend configured from `CAUSALX_LLM_*`; the model name in the
    /// environment overrides `config.model`.
    pub fn from_env(mut config: GatewayConfig) -> Result<Self, LlmError> {
        if let Ok(m) = std::env::var(http::ENV_MODEL) {
            config.model = m;
        }
        let client = HttpClient::from_env(RetryPolicy::default(), Duration::from_secs(config.timeout_secs))?;
        Self::new(Box::new(HttpChat::new(client)), config)
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Requests that reached the backend (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn request(&self, template: TemplateId, prompt: &str) -> ChatRequest {
        let t = match template {
            TemplateId::ExplainGen => self.config.explain_temperature,
            TemplateId::Recommend => self.config.recommend_temperature,
        };
        ChatRequest::user(&self.config.model, prompt, t, self.config.max_tokens)
    }

    fn lookup(&self, req: &ChatRequest) -> Option<String> {
        let cache = self.cache.lock().expect("cache lock");
        cache
            .get(&req.model, req.temperature, &req.cache_prompt())
            .map(str::to_string)
    }

    fn store(&self, req: &ChatRequest, response: &str) -> Result<(), LlmError> {
        self.cache
            .lock()
            .expect("cache lock")
            .insert(&req.model, req.temperature, &req.cache_prompt(), response)
    }

    fn call(&self, req: &ChatRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.backend.complete(req)
    }

    /// Cache first, then the backend; successes are cached.
    pub fn chat(&self, req: &ChatRequest) -> Result<String, LlmError> {
        req.validate()?;
        if let Some(hit) = self.lookup(req) {
            return Ok(hit);
        }
        let out = self.call(req)?;
        self.store(req, &out)?;
        Ok(out)
    }

    /// Skips the cache lookup (a fresh sample), and replaces the cached
    /// response on success.
    pub fn chat_fresh(&self, req: &ChatRequest) -> Result<String, LlmError> {
        req.validate()?;
        let out = self.call(req)?;
        self.store(req, &out)?;
        Ok(out)
    }

    /// Runs misses with at most `max_in_flight` concurrent backend calls;
    /// cache writes happen afterwards in input order.
    pub fn chat_many(&self, reqs: &[ChatRequest]) -> Vec<Result<String, LlmError>> {
        let mut out: Vec<Option<Result<String, LlmError>>> = reqs
            .iter()
            .map(|r| match r.validate() {
                Err(e) => Some(Err(e)),
                Ok(()) => self.lookup(r).map(Ok),
            })
            .collect();
        let misses: Vec<usize> = (0..reqs.len()).filter(|&k| out[k].is_none()).collect();
        if !misses.is_empty() {
            let run = || -> Vec<Result<String, LlmError>> {
                misses.par_iter().map(|&k| self.call(&reqs[k])).collect()
            };
            let fetched = match rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.max_in_flight.max(1))
                .build()
            {
                Ok(pool) => pool.install(run),
                Err(_) => misses.iter().map(|&k| self.call(&reqs[k])).collect(),
            };
            for (&k, res) in misses.iter().zip(fetched) {
                let res = res.and_then(|text| {
                    // Duplicate prompts within one batch are stored once.
                    if self.lookup(&reqs[k]).is_none() {
                        self.store(&reqs[k], &text)?;
                    }
                    Ok(text)
                });
                out[k] = Some(res);
            }
        }
        out.into_iter().map(|r| r.expect("every slot filled")).collect()
    }
}
