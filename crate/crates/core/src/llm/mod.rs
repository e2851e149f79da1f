//! Chat-completion client: request types, prompt budget, admission gate,
//! retries and transcripts, over a pluggable [`Transport`].

mod mock;
mod openai;
mod transcript;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{MockBackend, MockScriptError, MockStats};
pub use openai::OpenAiTransport;
pub use transcript::{Transcript, TranscriptRecord};

use crate::seed::sha256_hex;

/// Sampling temperature for query derivation.
pub const QUERY_TEMPERATURE: f64 = 0.85;
/// Sampling temperature for answering.
pub const RESPONSE_TEMPERATURE: f64 = 0.2;

pub const ENV_API_BASE: &str = "AUGCON_API_BASE";
pub const ENV_API_KEY: &str = "AUGCON_API_KEY";
pub const ENV_MODEL: &str = "AUGCON_MODEL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub max_new_tokens: u32,
    pub top_k: u32,
    pub top_p: f64,
    pub temperature: f64,
    /// Sampling seed forwarded to the backend; also keys the mock's replies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 4096,
            top_k: 50,
            top_p: 1.0,
            temperature: QUERY_TEMPERATURE,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn for_queries() -> Self {
        Self::default()
    }

    pub fn for_responses() -> Self {
        Self {
            temperature: RESPONSE_TEMPERATURE,
            ..Self::default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub params: GenerationParams,
    /// Stage label used for logging and mock routing.
    pub tag: String,
}

impl ChatRequest {
    /// A single-turn request.
    pub fn user(tag: impl Into<String>, content: impl Into<String>, params: GenerationParams) -> Self {
        Self {
            messages: vec![Message {
                role: Role::User,
                content: content.into(),
            }],
            params,
            tag: tag.into(),
        }
    }

    pub fn prompt_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }

    /// Content of the last user message.
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// Stable hash over roles and contents.
    pub fn prompt_hash(&self) -> String {
        let mut buf = String::new();
        for m in &self.messages {
            buf.push_str(&format!("{:?}\u{1f}{}\u{1e}", m.role, m.content));
        }
        sha256_hex(buf)
    }
}

/// Prompt size limit, enforced in characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptBudget {
    pub max_prompt_tokens: usize,
    pub chars_per_token: usize,
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            max_prompt_tokens: 4096,
            chars_per_token: 4,
        }
    }
}

impl PromptBudget {
    pub fn max_chars(&self) -> usize {
        self.max_prompt_tokens.saturating_mul(self.chars_per_token)
    }

    pub fn fits(&self, req: &ChatRequest) -> bool {
        req.prompt_chars() <= self.max_chars()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("[{tag}] transport failed after {attempts} attempt(s): {message}")]
    Transport {
        tag: String,
        attempts: u32,
        message: String,
    },
    #[error("[{tag}] prompt of {chars} chars exceeds budget of {budget}")]
    PromptTooLong {
        tag: String,
        chars: usize,
        budget: usize,
    },
    #[error("[{tag}] mock script exhausted")]
    ScriptExhausted { tag: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn tag(&self) -> Option<&str> {
        match self {
            BackendError::Transport { tag, .. }
            | BackendError::PromptTooLong { tag, .. }
            | BackendError::ScriptExhausted { tag } => Some(tag),
            BackendError::Config(_) => None,
        }
    }
}

/// Failure of a single send attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying (timeouts, 429, 5xx).
    Transient(String),
    /// Retrying will not help (4xx, malformed reply).
    Permanent(String),
    /// The mock has no reply left for this request.
    Exhausted,
}

/// One round trip to a chat model.
pub trait Transport: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError>;

    /// Whether transcripts may store prompts and replies verbatim.
    fn verbatim_transcripts(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model_name: String,
    pub max_in_flight: usize,
    /// Re-attempts after the first failed send.
    pub retry_limit: u32,
    /// First backoff delay in milliseconds; doubles on each retry.
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
    pub budget: PromptBudget,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            model_name: "default".into(),
            max_in_flight: 8,
            retry_limit: 2,
            retry_backoff_ms: 1000,
            timeout_secs: 300,
            budget: PromptBudget::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be >= 1".into()));
        }
        if self.budget.chars_per_token == 0 || self.budget.max_prompt_tokens == 0 {
            return Err(BackendError::Config("prompt budget must be positive".into()));
        }
        Ok(())
    }

    /// Override endpoint and model from `AUGCON_API_BASE` / `AUGCON_MODEL`.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(ENV_API_BASE) {
            self.endpoint = v;
        }
        if let Ok(v) = std::env::var(ENV_MODEL) {
            self.model_name = v;
        }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.retry_backoff_ms.saturating_mul(1u64 << retry.min(20)))
    }
}

/// Counting semaphore bounding concurrent sends.
struct Gate {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

struct GatePermit<'a>(&'a Gate);

impl Gate {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap();
        *n -= 1;
        self.0.cv.notify_one();
    }
}

/// The only way the rest of the crate talks to a model.
pub struct LlmClient {
    transport: Arc<dyn Transport>,
    cfg: BackendConfig,
    gate: Gate,
    transcript: Option<Arc<Transcript>>,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn Transport>, cfg: BackendConfig) -> Self {
        let gate = Gate::new(cfg.max_in_flight);
        Self {
            transport,
            cfg,
            gate,
            transcript: None,
        }
    }

    /// Client over the scripted mock with default settings and no backoff.
    pub fn mock(mock: MockBackend) -> Self {
        Self::new(
            Arc::new(mock),
            BackendConfig {
                retry_backoff_ms: 0,
                ..BackendConfig::default()
            },
        )
    }

    pub fn with_transcript(mut self, transcript: Arc<Transcript>) -> Self {
        self.transcript = Some(transcript);
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn budget(&self) -> PromptBudget {
        self.cfg.budget
    }

    pub fn max_in_flight(&self) -> usize {
        self.gate.max
    }

    pub fn check_budget(&self, req: &ChatRequest) -> Result<(), BackendError> {
        let chars = req.prompt_chars();
        let budget = self.cfg.budget.max_chars();
        if chars > budget {
            return Err(BackendError::PromptTooLong {
                tag: req.tag.clone(),
                chars,
                budget,
            });
        }
        Ok(())
    }

    /// Send one request, retrying transient failures with exponential backoff.
    pub fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        if req.last_user().is_empty() {
            return Err(BackendError::Config(format!(
                "[{}] request has no user message",
                req.tag
            )));
        }
        self.check_budget(req)?;

        let started = Instant::now();
        let mut attempts = 0u32;
        let outcome = loop {
            attempts += 1;
            let result = {
                let _permit = self.gate.acquire();
                self.transport.send(req)
            };
            match result {
                Ok(text) => break Ok(text),
                Err(TransportError::Transient(msg)) if attempts <= self.cfg.retry_limit => {
                    log::warn!("[{}] attempt {attempts} failed: {msg}; retrying", req.tag);
                    std::thread::sleep(self.cfg.backoff(attempts - 1));
                }
                Err(TransportError::Transient(message)) | Err(TransportError::Permanent(message)) => {
                    break Err(BackendError::Transport {
                        tag: req.tag.clone(),
                        attempts,
                        message,
                    })
                }
                Err(TransportError::Exhausted) => {
                    break Err(BackendError::ScriptExhausted {
                        tag: req.tag.clone(),
                    })
                }
            }
        };

        if let Some(t) = &self.transcript {
            t.record(TranscriptRecord::new(
                req,
                &outcome,
                started.elapsed(),
                attempts,
                self.transport.verbatim_transcripts(),
            ));
        }
        outcome
    }

    /// Complete every request with at most `max_in_flight` outstanding.
    ///
    /// Output index `i` answers input index `i`; failures stay per item.
    pub fn complete_many(&self, reqs: &[ChatRequest]) -> Vec<Result<String, BackendError>> {
        parallel_map(reqs, self.gate.max, |r| self.complete(r))
    }
}

/// Apply `f` to every item on up to `workers` threads, preserving order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let workers = workers.clamp(1, items.len());
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}
