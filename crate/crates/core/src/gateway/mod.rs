//! Chat-completion gateway: request/response types, retry with exponential
//! backoff, and a concurrency limiter shared by every clone of a [`Gateway`].
//!
//! Backends perform a single attempt; [`Gateway`] owns retries and the
//! in-flight budget.

mod http;
mod mock;
mod simulated;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{script_mock, seeded_text, FnBackend, ProbeBackend, ScriptRule, ScriptedMock};
pub use simulated::{lexicon_mentions, SimulatedModel, LEXICON};

pub const DEFAULT_API_KEY_ENV: &str = "REFLECTFORGE_API_KEY";

/// Repeated sampling where errors must surface.
pub const SAMPLING_TEMPERATURE: f32 = 0.8;
/// Judge and correction calls.
pub const STABLE_TEMPERATURE: f32 = 0.2;
/// Quality-filter replay trials.
pub const FILTER_TEMPERATURE: f32 = 0.7;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("server error {status} after {attempts} attempt(s)")]
    Server { status: u16, attempts: u32 },
    #[error("request rejected with status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("script for matcher {matcher:?} exhausted")]
    ScriptExhausted { matcher: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::RateLimited { .. }
                | GatewayError::Timeout { .. }
                | GatewayError::Server { .. }
                | GatewayError::Transport(_)
        )
    }

    fn with_attempts(self, n: u32) -> Self {
        match self {
            GatewayError::RateLimited { .. } => GatewayError::RateLimited { attempts: n },
            GatewayError::Timeout { .. } => GatewayError::Timeout { attempts: n },
            GatewayError::Server { status, .. } => GatewayError::Server { status, attempts: n },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f32,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: STABLE_TEMPERATURE,
            max_tokens: 1024,
            seed: None,
            stop: None,
        }
    }
}

impl GenerationParams {
    pub fn with_temperature(temperature: f32) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens < 1 {
            return Err(GatewayError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub params: GenerationParams,
    /// Correlation id. Never sent over the wire.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, messages: Vec<Message>, params: GenerationParams) -> Self {
        Self {
            messages,
            params,
            tag: tag.into(),
        }
    }

    /// Optional system message plus one user message.
    pub fn prompt(tag: impl Into<String>, system: Option<&str>, user: impl Into<String>, params: GenerationParams) -> Self {
        let mut messages = Vec::with_capacity(2);
        if let Some(s) = system.filter(|s| !s.trim().is_empty()) {
            messages.push(Message::system(s));
        }
        messages.push(Message::user(user));
        Self::new(tag, messages, params)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        self.params.validate()?;
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("no user message".into()));
        }
        if self
            .messages
            .windows(2)
            .any(|w| w[0].role == Role::Assistant && w[1].role == Role::Assistant)
        {
            return Err(GatewayError::InvalidRequest("consecutive assistant messages".into()));
        }
        Ok(())
    }

    /// All message contents joined by newlines.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    pub latency_ms: u64,
    /// Attempts used, including the successful one.
    pub attempts: u32,
}

impl ChatResponse {
    pub fn stop(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            finish_reason: FinishReason::Stop,
            usage: Usage::default(),
            latency_ms: 0,
            attempts: 1,
        }
    }
}

/// One attempt against a chat-completion endpoint.
pub trait Backend: Send + Sync {
    fn call(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    const MAX_BACKOFF_MS: u64 = 30_000;

    pub fn backoff(&self, failed_attempt: u32) -> Duration {
        let factor = 1u64 << failed_attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor).min(Self::MAX_BACKOFF_MS))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    /// Optional JSON script for the mock backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<std::path::PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "Qwen2.5-32B-Instruct".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            timeout_ms: 120_000,
            mock_script: None,
        }
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight < 1 {
            return Err(GatewayError::Config("max_in_flight must be >= 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(GatewayError::Config("retry.max_attempts must be >= 1".into()));
        }
        if self.kind == BackendKind::Http {
            if self.base_url.trim().is_empty() {
                return Err(GatewayError::Config("base_url is empty".into()));
            }
            if self.api_key_env.trim().is_empty() {
                return Err(GatewayError::Config("api_key_env is empty".into()));
            }
        }
        Ok(())
    }
}

struct Limiter {
    capacity: usize,
    state: Mutex<(usize, usize)>, // (in flight, peak)
    freed: Condvar,
}

impl Limiter {
    fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Mutex::new((0, 0)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock();
        while st.0 >= self.capacity {
            self.freed.wait(&mut st);
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock();
        st.0 -= 1;
        self.0.freed.notify_one();
    }
}

/// Retrying, concurrency-bounded front end over a [`Backend`].
///
/// Clones share the backend, the in-flight budget and the counters.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    limiter: Arc<Limiter>,
    attempts: Arc<AtomicU64>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, max_in_flight: usize, retry: RetryPolicy) -> Self {
        Self {
            backend,
            retry,
            limiter: Arc::new(Limiter::new(max_in_flight)),
            attempts: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Gateway over an explicit backend using the limits from `cfg`.
    pub fn with_backend(backend: Arc<dyn Backend>, cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        Ok(Self::new(backend, cfg.max_in_flight, cfg.retry.clone()))
    }

    /// HTTP gateway. Fails with [`GatewayError::Auth`] before any network
    /// traffic when the API key variable is unset.
    pub fn http(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let backend = HttpBackend::from_config(cfg)?;
        Ok(Self::new(Arc::new(backend), cfg.max_in_flight, cfg.retry.clone()))
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.capacity
    }

    /// Highest number of simultaneously outstanding backend calls so far.
    pub fn peak_in_flight(&self) -> usize {
        self.limiter.state.lock().1
    }

    /// Total backend attempts, retries included.
    pub fn total_attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let result = {
                let _permit = self.limiter.acquire();
                let started = std::time::Instant::now();
                self.backend.call(req).map(|mut r| {
                    if r.latency_ms == 0 {
                        r.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    r
                })
            };
            match result {
                Ok(mut resp) => {
                    resp.attempts = attempt;
                    return Ok(resp);
                }
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    log::debug!("{}: attempt {attempt} failed ({e}); retrying", req.tag);
                    std::thread::sleep(self.retry.backoff(attempt));
                }
                Err(e) => return Err(e.with_attempts(attempt)),
            }
        }
    }

    /// Completes every request; output position `i` answers request `i`.
    /// Failures are reported per position and never abort the batch.
    pub fn complete_many(&self, reqs: &[ChatRequest]) -> Vec<Result<ChatResponse, GatewayError>> {
        crate::par::map(reqs, |r| self.complete(r))
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("max_in_flight", &self.limiter.capacity)
            .field("retry", &self.retry)
            .finish()
    }
}
