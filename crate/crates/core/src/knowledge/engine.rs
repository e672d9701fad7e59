//! LLM engines: an OpenAI-compatible chat-completions client and a
//! deterministic mock for tests and offline runs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promptgen::content_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    pub api_key_env: String,
    /// Maximum in-flight requests during corpus augmentation.
    pub concurrency: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            endpoint: "https://api.openai.com/v1".to_string(),
            model: "gpt-3.5-turbo".to_string(),
            temperature: 0.0,
            max_tokens: Some(512),
            timeout_secs: 60,
            max_attempts: 5,
            backoff_ms: 1000,
            api_key_env: "OPENAI_API_KEY".to_string(),
            concurrency: 4,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be >= 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be >= 1".into()));
        }
        Ok(())
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub content: String,
    /// Unix seconds reported by the engine.
    pub created: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EngineFailure {
    /// Worth retrying: timeouts, connection errors, 429 and 5xx.
    Transient(String),
    Fatal(String),
}

impl std::fmt::Display for EngineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EngineFailure::Transient(m) => write!(f, "transient: {m}"),
            EngineFailure::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

pub trait Engine: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> std::result::Result<Completion, EngineFailure>;
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    created: u64,
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    #[serde(default)]
    content: Option<String>,
}

/// Chat-completions client; the prompt is sent as a single user message.
pub struct OpenAiEngine {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl OpenAiEngine {
    pub fn new(cfg: &EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Engine(e.to_string()))?;
        Ok(OpenAiEngine {
            client,
            url: format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/')),
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }
}

impl Engine for OpenAiEngine {
    fn id(&self) -> String {
        format!("openai:{}", self.url)
    }

    fn complete(&self, request: &ChatRequest) -> std::result::Result<Completion, EngineFailure> {
        let body = WireRequest {
            model: &request.model,
            messages: vec![WireMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| EngineFailure::Transient(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let detail = format!("HTTP {status}: {}", resp.text().unwrap_or_default());
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                EngineFailure::Transient(detail)
            } else {
                EngineFailure::Fatal(detail)
            });
        }
        let parsed: WireResponse = resp
            .json()
            .map_err(|e| EngineFailure::Fatal(format!("bad response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(Completion {
            content,
            created: parsed.created,
        })
    }
}

/// What the mock answers for prompts without a fixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockFallback {
    Error,
    Fixed(String),
    /// Restates the test text: `Text mentions: {text}`.
    EchoText,
}

/// Deterministic engine keyed by prompt content hash. Reports `created = 0`.
pub struct MockEngine {
    fixtures: HashMap<String, String>,
    fallback: MockFallback,
    calls: AtomicUsize,
    transient_failures: AtomicUsize,
}

impl MockEngine {
    pub fn new(fallback: MockFallback) -> Self {
        MockEngine {
            fixtures: HashMap::new(),
            fallback,
            calls: AtomicUsize::new(0),
            transient_failures: AtomicUsize::new(0),
        }
    }

    pub fn with_fixture(mut self, prompt_hash: impl Into<String>, response: impl Into<String>) -> Self {
        self.fixtures.insert(prompt_hash.into(), response.into());
        self
    }

    /// Reads JSON-lines fixtures `{"prompt_hash": ..., "response": ...}`.
    pub fn load_fixtures(mut self, src: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Fixture {
            prompt_hash: String,
            response: String,
        }
        for line in src.lines().filter(|l| !l.trim().is_empty()) {
            let f: Fixture = serde_json::from_str(line)?;
            self.fixtures.insert(f.prompt_hash, f.response);
        }
        Ok(self)
    }

    /// The next `n` calls fail transiently.
    pub fn fail_next(&self, n: usize) {
        self.transient_failures.store(n, Ordering::SeqCst);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Engine for MockEngine {
    fn id(&self) -> String {
        "mock".to_string()
    }

    fn complete(&self, request: &ChatRequest) -> std::result::Result<Completion, EngineFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let pending = self
            .transient_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1));
        if pending.is_ok() {
            return Err(EngineFailure::Transient("injected failure".into()));
        }
        let hash = content_hash(&request.prompt);
        let content = match self.fixtures.get(&hash) {
            Some(r) => r.clone(),
            None => match &self.fallback {
                MockFallback::Error => {
                    return Err(EngineFailure::Fatal(format!("no fixture for prompt {hash}")))
                }
                MockFallback::Fixed(s) => s.clone(),
                MockFallback::EchoText => {
                    let text = request
                        .prompt
                        .rsplit("\nText: ")
                        .next()
                        .and_then(|rest| rest.lines().next())
                        .unwrap_or("");
                    format!("Text mentions: {text}")
                }
            },
        };
        Ok(Completion { content, created: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: None,
        }
    }

    #[test]
    fn mock_fixture_and_fallbacks() {
        let p = "H\n\nText: a b\nImage: \nQuestion: Q\nAnswer: ";
        let m = MockEngine::new(MockFallback::Error).with_fixture(content_hash(p), "K.");
        assert_eq!(m.complete(&req(p)).unwrap().content, "K.");
        assert!(matches!(m.complete(&req("other")), Err(EngineFailure::Fatal(_))));
        assert_eq!(m.calls(), 2);

        let echo = MockEngine::new(MockFallback::EchoText);
        assert_eq!(echo.complete(&req(p)).unwrap().content, "Text mentions: a b");

        echo.fail_next(1);
        assert!(matches!(echo.complete(&req(p)), Err(EngineFailure::Transient(_))));
        assert!(echo.complete(&req(p)).is_ok());
    }

    #[test]
    fn config_validation_and_backoff() {
        let mut cfg = EngineConfig::default();
        assert_eq!(cfg.model, "gpt-3.5-turbo");
        assert_eq!(cfg.temperature, 0.0);
        assert_eq!(cfg.backoff(0), Duration::from_secs(1));
        assert_eq!(cfg.backoff(2), Duration::from_secs(4));
        cfg.temperature = -0.1;
        assert!(cfg.validate().is_err());
        cfg.temperature = 0.0;
        cfg.max_attempts = 0;
        assert!(cfg.validate().is_err());
    }
}
