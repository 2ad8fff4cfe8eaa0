//! Chat-completions and embeddings over HTTP with retry.

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use ureq::Agent;

use super::{ChatBackend, ChatRequest, Embedder, LlmError};

pub const ENV_BASE_URL: &str = "CAUSALX_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "CAUSALX_LLM_API_KEY";
pub const ENV_MODEL: &str = "CAUSALX_LLM_MODEL";

/// Transport errors and 5xx responses are retried after `base_delay`,
/// `2 * base_delay`, ...; 4xx responses fail immediately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpClient {
    agent: Agent,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl HttpClient {
    pub fn new(base_url: &str, api_key: Option<String>, retry: RetryPolicy, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            retry,
        }
    }

    /// Reads the base URL and key from the environment.
    pub fn from_env(retry: RetryPolicy, timeout: Duration) -> Result<Self, LlmError> {
        let base = std::env::var(ENV_BASE_URL)
            .map_err(|_| LlmError::Config(format!("{ENV_BASE_URL} is not set")))?;
        Ok(Self::new(&base, std::env::var(ENV_API_KEY).ok(), retry, timeout))
    }

    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let (status, last) = match self.send_once(&url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable { status, message }) => (status, message),
            };
            if attempt > self.retry.retries {
                return Err(LlmError::Exhausted {
                    attempts: attempt,
                    status,
                    last,
                });
            }
            let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
            log::warn!("request to {url} failed ({last}); retry {attempt} in {delay:?}");
            thread::sleep(delay);
        }
    }

    fn send_once(&self, url: &str, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retryable {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retryable {
            status: Some(status),
            message: e.to_string(),
        })?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Attempt::Fatal(LlmError::Protocol(format!("invalid JSON response: {e}")))),
            400..=499 => Err(Attempt::Fatal(LlmError::Client { status, body: text })),
            _ => Err(Attempt::Retryable {
                status: Some(status),
                message: format!("HTTP {status}: {}", truncate(&text, 200)),
            }),
        }
    }
}

enum Attempt {
    Fatal(LlmError),
    Retryable { status: Option<u16>, message: String },
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// `POST {base}/chat/completions`, answer at `choices[0].message.content`.
#[derive(Debug, Clone)]
pub struct HttpChat {
    client: HttpClient,
}

impl HttpChat {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

pub fn chat_body(req: &ChatRequest) -> Value {
    json!({
        "model": req.model,
        "messages": req.messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    })
}

impl ChatBackend for HttpChat {
    fn complete(&self, req: &ChatRequest) -> Result<String, LlmError> {
        let v = self.client.post_json("chat/completions", &chat_body(req))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::Protocol("response lacks choices[0].message.content".into()))
    }
}

/// `POST {base}/embeddings`, vectors at `data[k].embedding`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: HttpClient,
    model: String,
}

impl HttpEmbedder {
    pub fn new(client: HttpClient, model: &str) -> Self {
        Self {
            client,
            model: model.to_string(),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, LlmError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let v = self
            .client
            .post_json("embeddings", &json!({"model": self.model, "input": texts}))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::Protocol("embeddings response lacks data".into()))?;
        if data.len() != texts.len() {
            return Err(LlmError::Protocol(format!(
                "{} embeddings for {} texts",
                data.len(),
                texts.len()
            )));
        }
        data.iter()
            .map(|d| {
                d.get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| LlmError::Protocol("entry lacks embedding".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|f| f as f32)
                            .ok_or_else(|| LlmError::Protocol("non-numeric embedding".into()))
                    })
                    .collect()
            })
            .collect()
    }
}
