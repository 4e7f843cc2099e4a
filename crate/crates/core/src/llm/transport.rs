//! Chat-completion transport: the wire types, an HTTP client with bounded
//! retries, and a canned stub for tests and dry runs.
//!
//! Request/response bodies follow the common chat-completion schema and are
//! treated as opaque except for the generated text and the top
//! log-probabilities of the first generated token.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::GatewayError;

/// Environment variable holding the API key for the HTTP transport.
pub const API_KEY_ENV: &str = "INQUIRE_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".to_owned(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
}

impl ChatRequest {
    pub fn text(model: impl Into<String>, temperature: f64, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature,
            max_tokens: None,
            logprobs: false,
            top_logprobs: None,
        }
    }

    /// Single-token completion that returns the top log-probabilities of
    /// the next token, for the probability-weighted scorer.
    pub fn next_token_logprobs(
        model: impl Into<String>,
        prompt: impl Into<String>,
        top_n: u32,
    ) -> Self {
        Self {
            model: model.into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.0,
            max_tokens: Some(1),
            logprobs: true,
            top_logprobs: Some(top_n),
        }
    }
}

/// What the toolkit extracts from a completion: the text and, when
/// requested, the top log-probabilities of the first generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_top_logprobs: Option<BTreeMap<String, f64>>,
}

impl ChatResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            first_token_top_logprobs: None,
        }
    }

    pub fn with_logprobs(entries: impl IntoIterator<Item = (String, f64)>) -> Self {
        Self {
            content: String::new(),
            first_token_top_logprobs: Some(entries.into_iter().collect()),
        }
    }
}

/// A chat-completion endpoint. Implementations must be safe to call from
/// several worker threads.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

// Wire-side response structures, parsed leniently.
#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Vec<WireTokenLogprob>,
}

#[derive(Debug, Deserialize)]
struct WireTokenLogprob {
    #[serde(default)]
    top_logprobs: Vec<WireTopLogprob>,
}

#[derive(Debug, Deserialize)]
struct WireTopLogprob {
    token: String,
    logprob: f64,
}

#[derive(Debug, Clone)]
pub struct HttpTransportConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub api_key: Option<String>,
    /// Retries after the first attempt; transport failures and 429/5xx
    /// responses are retried, other HTTP errors are not.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
}

impl HttpTransportConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            request_timeout: Duration::from_secs(120),
        }
    }
}

/// Blocking HTTP transport with exponential backoff.
pub struct HttpTransport {
    config: HttpTransportConfig,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(config: HttpTransportConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { config, client })
    }

    fn attempt(&self, request: &ChatRequest) -> Result<ChatResponse, AttemptError> {
        let mut builder = self.client.post(&self.config.endpoint).json(request);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| AttemptError::Retryable(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(format!("http {status}: {body}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(GatewayError::Http {
                status: status.as_u16(),
                body,
            }));
        }
        let wire: WireResponse = serde_json::from_str(&body).map_err(|e| {
            AttemptError::Fatal(GatewayError::BadResponse {
                reason: format!("unparseable completion body: {e}"),
                raw: body.clone(),
            })
        })?;
        let choice = wire.choices.into_iter().next().ok_or_else(|| {
            AttemptError::Fatal(GatewayError::BadResponse {
                reason: "response has no choices".to_owned(),
                raw: body.clone(),
            })
        })?;
        let first_token_top_logprobs = choice.logprobs.and_then(|lp| {
            lp.content.into_iter().next().map(|token| {
                token
                    .top_logprobs
                    .into_iter()
                    .map(|t| (t.token, t.logprob))
                    .collect()
            })
        });
        Ok(ChatResponse {
            content: choice.message.content.unwrap_or_default(),
            first_token_top_logprobs,
        })
    }
}

enum AttemptError {
    Retryable(String),
    Fatal(GatewayError),
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut backoff = self.config.initial_backoff;
        let attempts = self.config.max_retries + 1;
        let mut last_message = String::new();
        for attempt in 0..attempts {
            match self.attempt(request) {
                Ok(response) => return Ok(response),
                Err(AttemptError::Fatal(error)) => return Err(error),
                Err(AttemptError::Retryable(message)) => {
                    log::warn!("attempt {}/{attempts} failed: {message}", attempt + 1);
                    last_message = message;
                    if attempt + 1 < attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last_message,
        })
    }
}

/// Canned transport: returns queued responses in order and records every
/// request it sees.
#[derive(Debug, Default)]
pub struct StubTransport {
    responses: Mutex<VecDeque<ChatResponse>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl StubTransport {
    pub fn new(responses: impl IntoIterator<Item = ChatResponse>) -> Self {
        Self {
            responses: Mutex::new(responses.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Requests seen so far, in call order.
    pub fn seen_requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl ChatTransport for StubTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.requests.lock().unwrap().push(request.clone());
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| GatewayError::Transport {
                attempts: 1,
                message: "stub transport has no queued response".to_owned(),
            })
    }
}
