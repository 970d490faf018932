//! Clients for the planner, generator, judge and search services.
//!
//! Every network call in the crate goes through this module. Each service
//! is reached through a trait ([`ChatModel`], [`SearchBackend`]) so tests
//! and desk-scale runs can inject in-process doubles.

mod chat;
pub mod doubles;
mod http;
mod judge;
mod limit;
mod search;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chat::{Backoff, ChatClient, ChatTransport, AttemptError, Sleeper, ThreadSleeper};
pub use http::OpenAiTransport;
pub use judge::{judge_process_score, judge_yes_no, parse_process_score, parse_yes_no, JudgeError};
pub use limit::{GatePermit, RequestGate};
pub use search::{
    connect_search, HttpRetriever, MockCorpus, SearchBackend, SearchClient, SearchEndpoint,
    SearchError, SearchHit, SearchKind, WebSearch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self { role: Role::Tool, content: content.into() }
    }
}

/// Checks the request shape shared by every chat backend.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), String> {
    let first = messages.first().ok_or("no messages")?;
    if !matches!(first.role, Role::System | Role::User) {
        return Err("first message must be system or user".into());
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.content.is_empty() && m.role != Role::Assistant)
    {
        return Err(format!("empty {:?} message", m.role));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientErrorKind {
    Timeout,
    RateLimited,
    MalformedResponse,
    AuthFailure,
    /// Connection failures and 5xx responses.
    Unavailable,
    InvalidRequest,
}

impl ClientErrorKind {
    pub fn is_transient(self) -> bool {
        matches!(self, Self::Timeout | Self::RateLimited | Self::Unavailable)
    }
}

impl fmt::Display for ClientErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Timeout => "timeout",
            Self::RateLimited => "rate limited",
            Self::MalformedResponse => "malformed response",
            Self::AuthFailure => "auth failure",
            Self::Unavailable => "unavailable",
            Self::InvalidRequest => "invalid request",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{kind} from {endpoint} after {attempts} attempt(s): {message}")]
pub struct ClientError {
    pub kind: ClientErrorKind,
    pub endpoint: String,
    pub attempts: u32,
    pub message: String,
}

impl ClientError {
    pub fn new(
        kind: ClientErrorKind,
        endpoint: impl Into<String>,
        attempts: u32,
        message: impl Into<String>,
    ) -> Self {
        Self {
            kind,
            endpoint: endpoint.into(),
            attempts,
            message: message.into(),
        }
    }
}

/// A chat-completion service.
pub trait ChatModel: Send + Sync {
    /// Stable identity used in logs, errors and cache keys.
    fn id(&self) -> &str;

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError>;
}

impl<T: ChatModel + ?Sized> ChatModel for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        (**self).complete(messages)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    /// OpenAI-compatible `/chat/completions` over HTTP.
    #[default]
    Openai,
    /// Deterministic rule table loaded from `rules_path`.
    Rules,
    /// Echoes the last user message.
    Echo,
}

fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_output_tokens() -> u32 {
    1024
}
fn default_max_in_flight() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    #[serde(default)]
    pub provider: Provider,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ModelEndpoint {
    fn default() -> Self {
        Self {
            provider: Provider::Openai,
            base_url: "http://localhost:8000/v1".into(),
            model_name: "default".into(),
            api_key_env: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            max_in_flight: default_max_in_flight(),
            requests_per_second: None,
            rules_path: None,
            seed: None,
        }
    }
}

impl ModelEndpoint {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn identity(&self) -> String {
        match self.provider {
            Provider::Openai => format!("{}@{}", self.model_name, self.base_url),
            Provider::Rules => format!(
                "rules:{}",
                self.rules_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default()
            ),
            Provider::Echo => "echo".into(),
        }
    }

    /// Lists every violated constraint; `field` prefixes the messages.
    pub fn problems(&self, field: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            out.push(format!("{field}.timeout_secs must be > 0"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            out.push(format!("{field}.temperature must be within [0, 2]"));
        }
        if self.max_output_tokens < 1 {
            out.push(format!("{field}.max_output_tokens must be >= 1"));
        }
        if self.max_in_flight < 1 {
            out.push(format!("{field}.max_in_flight must be >= 1"));
        }
        if let Some(rps) = self.requests_per_second {
            if rps.is_nan() || rps <= 0.0 {
                out.push(format!("{field}.requests_per_second must be > 0"));
            }
        }
        match self.provider {
            Provider::Openai if self.base_url.trim().is_empty() => {
                out.push(format!("{field}.base_url is required"));
            }
            Provider::Rules => match &self.rules_path {
                None => out.push(format!("{field}.rules_path is required for provider=rules")),
                Some(p) if !p.exists() => {
                    out.push(format!("{field}.rules_path {} does not exist", p.display()))
                }
                _ => {}
            },
            _ => {}
        }
        out
    }
}

/// Builds the client an endpoint describes.
pub fn connect_model(endpoint: &ModelEndpoint) -> Result<Arc<dyn ChatModel>, ClientError> {
    let problems = endpoint.problems("endpoint");
    if !problems.is_empty() {
        return Err(ClientError::new(
            ClientErrorKind::InvalidRequest,
            endpoint.identity(),
            0,
            problems.join("; "),
        ));
    }
    match endpoint.provider {
        Provider::Openai => {
            let transport = OpenAiTransport::from_endpoint(endpoint).map_err(|m| {
                ClientError::new(ClientErrorKind::AuthFailure, endpoint.identity(), 0, m)
            })?;
            Ok(Arc::new(ChatClient::new(endpoint.clone(), Arc::new(transport))))
        }
        Provider::Rules => {
            let path = endpoint.rules_path.as_ref().expect("checked above");
            let model = doubles::RuleModel::from_file(path).map_err(|m| {
                ClientError::new(ClientErrorKind::InvalidRequest, endpoint.identity(), 0, m)
            })?;
            Ok(Arc::new(model))
        }
        Provider::Echo => Ok(Arc::new(doubles::EchoModel::new("echo"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_validation() {
        assert!(validate_messages(&[]).is_err());
        assert!(validate_messages(&[ChatMessage::assistant("x")]).is_err());
        assert!(validate_messages(&[ChatMessage::user("")]).is_err());
        assert!(validate_messages(&[ChatMessage::user("q"), ChatMessage::assistant("")]).is_ok());
        assert!(validate_messages(&[ChatMessage::system("s"), ChatMessage::tool("r")]).is_ok());
    }

    #[test]
    fn endpoint_constraints() {
        let ep = ModelEndpoint {
            timeout_secs: 0.0,
            temperature: 3.0,
            max_output_tokens: 0,
            ..Default::default()
        };
        let p = ep.problems("planner");
        assert_eq!(p.len(), 3, "{p:?}");
        assert!(p[0].starts_with("planner.timeout_secs"));
        assert!(ModelEndpoint::default().problems("x").is_empty());

        let rules = ModelEndpoint {
            provider: Provider::Rules,
            ..Default::default()
        };
        assert_eq!(rules.problems("judge").len(), 1);
    }

    #[test]
    fn connect_echo() {
        let ep = ModelEndpoint {
            provider: Provider::Echo,
            ..Default::default()
        };
        let m = connect_model(&ep).unwrap();
        assert_eq!(m.complete(&[ChatMessage::user("hi")]).unwrap(), "hi");
    }
}
