//! OpenAI-compatible `/chat/completions` transport.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendConfig, BackendError, ChatRequest, Message, Transport, TransportError, ENV_API_KEY};

pub struct OpenAiTransport {
    http: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    max_tokens: u32,
    temperature: f64,
    top_p: f64,
    top_k: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl OpenAiTransport {
    pub fn new(cfg: &BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            http,
            url: format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/')),
            model: cfg.model_name.clone(),
            api_key,
        })
    }

    /// Like [`OpenAiTransport::new`], taking the key from `AUGCON_API_KEY`.
    pub fn from_env(cfg: &BackendConfig) -> Result<Self, BackendError> {
        Self::new(cfg, std::env::var(ENV_API_KEY).ok())
    }
}

impl Transport for OpenAiTransport {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        let body = WireRequest {
            model: &self.model,
            messages: &req.messages,
            max_tokens: req.params.max_new_tokens,
            temperature: req.params.temperature,
            top_p: req.params.top_p,
            top_k: req.params.top_k,
            seed: req.params.seed,
        };
        let mut call = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call
            .send()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(TransportError::Permanent(format!("HTTP {status}: {text}")));
        }
        let parsed: WireResponse = resp
            .json()
            .map_err(|e| TransportError::Permanent(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| TransportError::Permanent("response has no choices".into()))
    }
}
