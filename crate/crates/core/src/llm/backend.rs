use std::collections::HashMap;
use std::io::Read;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionParams {
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            max_tokens: 256,
            temperature: 0.0,
        }
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, LlmError>;
}

/// Always fails, so every caller takes its deterministic fallback.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullBackend;

impl CompletionBackend for NullBackend {
    fn complete(&self, _prompt: &str, _params: &CompletionParams) -> Result<String, LlmError> {
        Err(LlmError::Backend("null backend".into()))
    }
}

/// Hex SHA-256 of the prompt bytes; the key of mock fixtures.
pub fn prompt_hash(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Replays canned responses keyed by prompt hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockBackend {
    #[serde(default)]
    pub responses: HashMap<String, String>,
    /// Returned for prompts without an entry; without one those fail.
    #[serde(default)]
    pub default: Option<String>,
}

impl MockBackend {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            responses: pairs
                .into_iter()
                .map(|(p, r)| (prompt_hash(p), r.to_owned()))
                .collect(),
            default: None,
        }
    }

    pub fn with_default(response: impl Into<String>) -> Self {
        Self {
            responses: HashMap::new(),
            default: Some(response.into()),
        }
    }

    /// Fixture file: `{"responses": {"<sha256>": "…"}, "default": "…"}`.
    pub fn load<R: Read>(source: R) -> Result<Self, LlmError> {
        serde_json::from_reader(source).map_err(|e| LlmError::Fixture(e.to_string()))
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, prompt: &str, _params: &CompletionParams) -> Result<String, LlmError> {
        self.responses
            .get(&prompt_hash(prompt))
            .or(self.default.as_ref())
            .cloned()
            .ok_or_else(|| LlmError::Backend("no fixture for prompt".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    /// Environment variable holding a bearer token, if any.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            api_key_env: Some("EMBRAG_API_KEY".into()),
            timeout_secs: 60.0,
            retries: 2,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

/// Text completion over HTTP: POSTs `{prompt, max_tokens, temperature}` and
/// reads `text` (or `completion`, or `choices[0].text`) from the JSON reply.
pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        if config.endpoint.is_empty() {
            return Err(LlmError::Backend("no endpoint configured".into()));
        }
        if !(config.timeout_secs > 0.0 && config.timeout_secs.is_finite()) {
            return Err(LlmError::Backend("timeout must be positive".into()));
        }
        let api_key = config.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, api_key, agent })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn attempt(&self, prompt: &str, params: &CompletionParams) -> Result<String, LlmError> {
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let body = CompletionRequest {
            prompt,
            max_tokens: params.max_tokens,
            temperature: params.temperature,
        };
        let mut response = request
            .send_json(&body)
            .map_err(|e| LlmError::Backend(e.to_string()))?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Backend(e.to_string()))?;
        value
            .get("text")
            .or_else(|| value.get("completion"))
            .or_else(|| value.pointer("/choices/0/text"))
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| LlmError::Backend("response has no completion text".into()))
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, LlmError> {
        let mut attempt = 0;
        loop {
            match self.attempt(prompt, params) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.config.retries => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("completion attempt {} failed ({e}); retrying in {wait} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Completes every prompt with at most `max_in_flight` requests at once.
/// Results come back in prompt order.
pub fn complete_all(
    backend: &dyn CompletionBackend,
    prompts: &[String],
    params: &CompletionParams,
    max_in_flight: usize,
) -> Result<Vec<Result<String, LlmError>>, LlmError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| LlmError::Backend(e.to_string()))?;
    Ok(pool.install(|| prompts.par_iter().map(|p| backend.complete(p, params)).collect()))
}
