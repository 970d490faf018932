use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::chat::{AttemptError, ChatTransport};
use super::{ChatMessage, ClientErrorKind, ModelEndpoint, Role};

/// OpenAI-compatible `POST {base_url}/chat/completions`.
///
/// Tool observations are sent with the `user` role; their content already
/// carries the `<tool_response>` wrapper.
pub struct OpenAiTransport {
    agent: ureq::Agent,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
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

fn wire_role(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User | Role::Tool => "user",
        Role::Assistant => "assistant",
    }
}

/// Reads the API key named by the endpoint from the environment.
pub(crate) fn resolve_api_key(var: Option<&str>) -> Result<Option<String>, String> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| format!("environment variable {name} is not set")),
    }
}

pub(crate) fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

pub(crate) fn classify_status(status: u16) -> ClientErrorKind {
    match status {
        401 | 403 => ClientErrorKind::AuthFailure,
        429 => ClientErrorKind::RateLimited,
        408 | 500..=599 => ClientErrorKind::Unavailable,
        _ => ClientErrorKind::InvalidRequest,
    }
}

pub(crate) fn classify_error(e: &ureq::Error) -> ClientErrorKind {
    match e {
        ureq::Error::Timeout(_) => ClientErrorKind::Timeout,
        ureq::Error::StatusCode(s) => classify_status(*s),
        ureq::Error::Json(_) => ClientErrorKind::MalformedResponse,
        _ => ClientErrorKind::Unavailable,
    }
}

impl OpenAiTransport {
    pub fn from_endpoint(endpoint: &ModelEndpoint) -> Result<Self, String> {
        Ok(Self {
            agent: agent(),
            api_key: resolve_api_key(endpoint.api_key_env.as_deref())?,
        })
    }
}

impl ChatTransport for OpenAiTransport {
    fn send(
        &self,
        endpoint: &ModelEndpoint,
        messages: &[ChatMessage],
        timeout: Duration,
    ) -> Result<String, AttemptError> {
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let body = WireRequest {
            model: &endpoint.model_name,
            messages: messages
                .iter()
                .map(|m| WireMessage {
                    role: wire_role(m.role),
                    content: &m.content,
                })
                .collect(),
            temperature: endpoint.temperature,
            max_tokens: endpoint.max_output_tokens,
            seed: endpoint.seed,
        };
        let mut req = self
            .agent
            .post(&url)
            .config()
            .timeout_global(Some(timeout))
            .build();
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| AttemptError::new(classify_error(&e), e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(Duration::from_secs_f64);
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            let mut err = AttemptError::new(
                classify_status(status),
                format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
            );
            err.retry_after = retry_after;
            return Err(err);
        }
        let parsed: WireResponse = resp.body_mut().read_json().map_err(|e| {
            let kind = match e {
                ureq::Error::Timeout(_) => ClientErrorKind::Timeout,
                _ => ClientErrorKind::MalformedResponse,
            };
            AttemptError::new(kind, e.to_string())
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| {
                AttemptError::new(ClientErrorKind::MalformedResponse, "response has no message content")
            })
    }
}
