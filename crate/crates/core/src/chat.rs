//! Chat-completion clients: the shared trait, a deterministic stub, a
//! reference-model client and (with the `http` feature) a live HTTP client.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refmodel::{classify, TinyLM, Tokenizer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChatError {
    #[error("chat endpoint unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    /// Retryable failure (timeout, connection reset, 429, 5xx).
    #[error("transient chat failure: {0}")]
    Transient(String),
    #[error("chat request rejected: {0}")]
    Rejected(String),
    #[error("empty completion")]
    EmptyCompletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub model: String,
    /// Record identifier; never sent over the wire, used by stubs.
    #[serde(skip)]
    pub record_id: Option<String>,
    /// The text the prompt wraps (usually a narrative); never sent.
    #[serde(skip)]
    pub payload: Option<String>,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            temperature: 0.0,
            model: String::new(),
            record_id: None,
            payload: None,
        }
    }
}

/// Anything that turns a system + user message into a completion.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        (**self).complete(request)
    }
}

/// Deterministic offline client.
#[derive(Debug, Clone, PartialEq)]
pub enum StubClient {
    /// Returns the request payload (or the user text when there is none).
    Echo,
    /// Looks the record id up in a table; unknown ids echo when `echo_missing`.
    Table {
        completions: BTreeMap<String, String>,
        echo_missing: bool,
    },
    /// Always returns the same text.
    Fixed(String),
}

impl StubClient {
    pub fn table(completions: BTreeMap<String, String>) -> Self {
        StubClient::Table {
            completions,
            echo_missing: true,
        }
    }

    fn echo(request: &ChatRequest) -> String {
        request.payload.clone().unwrap_or_else(|| request.user.clone())
    }
}

impl ChatClient for StubClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        match self {
            StubClient::Echo => Ok(Self::echo(request)),
            StubClient::Fixed(s) => Ok(s.clone()),
            StubClient::Table {
                completions,
                echo_missing,
            } => {
                let hit = request.record_id.as_ref().and_then(|id| completions.get(id));
                match hit {
                    Some(s) => Ok(s.clone()),
                    None if *echo_missing => Ok(Self::echo(request)),
                    None => Err(ChatError::Rejected(format!(
                        "no stub completion for {:?}",
                        request.record_id
                    ))),
                }
            }
        }
    }
}

/// Wraps a pure function of the request.
pub struct FnClient<F>(pub F);

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, ChatError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        (self.0)(request)
    }
}

/// Answers classification prompts with the reference model's label for
/// the request payload.
pub struct RefModelClient<'a> {
    pub model: &'a TinyLM,
    pub tokenizer: &'a Tokenizer,
}

impl ChatClient for RefModelClient<'_> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        let text = request.payload.as_deref().unwrap_or(&request.user);
        Ok(classify(self.model, self.tokenizer, text).label.label().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1), capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Sends `request`, retrying transient failures with exponential backoff.
/// Empty completions are reported as `EmptyCompletion`.
pub fn complete_with_retry(
    client: &dyn ChatClient,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<String, ChatError> {
    let attempts = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        match client.complete(request) {
            Ok(text) if text.trim().is_empty() => return Err(ChatError::EmptyCompletion),
            Ok(text) => return Ok(text),
            Err(ChatError::Transient(msg)) => {
                last = msg;
                if attempt < attempts {
                    std::thread::sleep(policy.delay(attempt));
                }
            }
            Err(other) => return Err(other),
        }
    }
    Err(ChatError::Unavailable {
        attempts,
        message: last,
    })
}

#[cfg(feature = "http")]
pub use http::HttpClient;

#[cfg(feature = "http")]
mod http {
    use super::*;

    pub const ENDPOINT_VAR: &str = "CRASHLENS_CHAT_ENDPOINT";
    pub const API_KEY_VAR: &str = "CRASHLENS_API_KEY";

    /// Chat-completion client for OpenAI-style JSON endpoints.
    pub struct HttpClient {
        endpoint: String,
        api_key: Option<String>,
        agent: ureq::Agent,
    }

    #[derive(Serialize)]
    struct Message<'a> {
        role: &'a str,
        content: &'a str,
    }

    #[derive(Serialize)]
    struct Body<'a> {
        model: &'a str,
        temperature: f64,
        messages: [Message<'a>; 2],
    }

    #[derive(Deserialize)]
    struct Reply {
        choices: Vec<Choice>,
    }

    #[derive(Deserialize)]
    struct Choice {
        message: ReplyMessage,
    }

    #[derive(Deserialize)]
    struct ReplyMessage {
        content: Option<String>,
    }

    impl HttpClient {
        pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into();
            Self {
                endpoint: endpoint.into(),
                api_key,
                agent,
            }
        }

        /// Endpoint from the argument or `CRASHLENS_CHAT_ENDPOINT`; key from
        /// `CRASHLENS_API_KEY`.
        pub fn from_env(endpoint: Option<&str>) -> Result<Self, ChatError> {
            let endpoint = match endpoint {
                Some(e) => e.to_string(),
                None => std::env::var(ENDPOINT_VAR).map_err(|_| {
                    ChatError::Rejected(format!("no endpoint configured and {ENDPOINT_VAR} unset"))
                })?,
            };
            let key = std::env::var(API_KEY_VAR).ok();
            Ok(Self::new(endpoint, key, Duration::from_secs(120)))
        }
    }

    impl ChatClient for HttpClient {
        fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
            let body = Body {
                model: &request.model,
                temperature: request.temperature,
                messages: [
                    Message {
                        role: "system",
                        content: &request.system,
                    },
                    Message {
                        role: "user",
                        content: &request.user,
                    },
                ],
            };
            let mut req = self.agent.post(&self.endpoint);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req.send_json(&body).map_err(|e| match e {
                ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                    ChatError::Transient(format!("HTTP {code}"))
                }
                ureq::Error::StatusCode(code) => ChatError::Rejected(format!("HTTP {code}")),
                other => ChatError::Transient(other.to_string()),
            })?;
            let reply: Reply = resp
                .body_mut()
                .read_json()
                .map_err(|e| ChatError::Rejected(format!("bad response body: {e}")))?;
            let text = reply
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .unwrap_or_default();
            if text.trim().is_empty() {
                return Err(ChatError::EmptyCompletion);
            }
            Ok(text)
        }
    }
}
