//! In-process stand-ins for model services.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{validate_messages, ChatMessage, ChatModel, ClientError, ClientErrorKind, Role};

fn invalid(id: &str, m: String) -> ClientError {
    ClientError::new(ClientErrorKind::InvalidRequest, id, 1, m)
}

/// Returns queued replies in order and records every request.
pub struct ScriptedModel {
    id: String,
    queue: Mutex<VecDeque<Result<String, ClientError>>>,
    repeat_last: Option<String>,
    received: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedModel {
    pub fn new<I, S>(id: &str, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_outcomes(id, replies.into_iter().map(|r| Ok(r.into())).collect())
    }

    pub fn with_outcomes(id: &str, outcomes: Vec<Result<String, ClientError>>) -> Self {
        Self {
            id: id.into(),
            queue: Mutex::new(outcomes.into()),
            repeat_last: None,
            received: Mutex::new(Vec::new()),
        }
    }

    /// Replies with `reply` forever once the queue is empty.
    pub fn then_forever(mut self, reply: impl Into<String>) -> Self {
        self.repeat_last = Some(reply.into());
        self
    }

    pub fn received(&self) -> Vec<Vec<ChatMessage>> {
        self.received.lock().expect("lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.received.lock().expect("lock").len()
    }
}

impl ChatModel for ScriptedModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        validate_messages(messages).map_err(|m| invalid(&self.id, m))?;
        self.received.lock().expect("lock").push(messages.to_vec());
        match self.queue.lock().expect("lock").pop_front() {
            Some(r) => r,
            None => match &self.repeat_last {
                Some(r) => Ok(r.clone()),
                None => Err(invalid(&self.id, "script exhausted".into())),
            },
        }
    }
}

/// Returns the last user (or tool) message.
pub struct EchoModel {
    id: String,
}

impl EchoModel {
    pub fn new(id: &str) -> Self {
        Self { id: id.into() }
    }
}

impl ChatModel for EchoModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        validate_messages(messages).map_err(|m| invalid(&self.id, m))?;
        Ok(messages
            .iter()
            .rev()
            .find(|m| m.role != Role::Assistant && m.role != Role::System)
            .map(|m| m.content.clone())
            .unwrap_or_default())
    }
}

type Responder = dyn Fn(&[ChatMessage]) -> Result<String, ClientError> + Send + Sync;

/// Replies computed by a closure over the request. Stateless closures make
/// the double safe for concurrent, order-independent use.
pub struct FnModel {
    id: String,
    f: Box<Responder>,
}

impl FnModel {
    pub fn new<F>(id: &str, f: F) -> Self
    where
        F: Fn(&[ChatMessage]) -> Result<String, ClientError> + Send + Sync + 'static,
    {
        Self {
            id: id.into(),
            f: Box::new(f),
        }
    }
}

impl ChatModel for FnModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        validate_messages(messages).map_err(|m| invalid(&self.id, m))?;
        (self.f)(messages)
    }
}

/// Counts calls passed through to an inner model.
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M: ChatModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<M: ChatModel> ChatModel for CountingModel<M> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(messages)
    }
}

/// One entry of a rule table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    /// Substrings that must all occur in the conversation.
    #[serde(default)]
    pub all: Vec<String>,
    /// Substrings that must not occur.
    #[serde(default)]
    pub none: Vec<String>,
    pub reply: String,
}

impl Rule {
    fn matches(&self, haystack: &str) -> bool {
        self.all.iter().all(|s| haystack.contains(s.as_str()))
            && !self.none.iter().any(|s| haystack.contains(s.as_str()))
    }
}

/// Deterministic model driven by an ordered rule table: the first rule
/// whose conditions hold over the concatenated messages supplies the reply.
/// File format: one JSON [`Rule`] per line.
#[derive(Debug, Clone)]
pub struct RuleModel {
    id: String,
    rules: Arc<Vec<Rule>>,
}

impl RuleModel {
    pub fn new(id: &str, rules: Vec<Rule>) -> Self {
        Self {
            id: id.into(),
            rules: Arc::new(rules),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read rules {}: {e}", path.display()))?;
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            rules.push(
                serde_json::from_str(line)
                    .map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?,
            );
        }
        Ok(Self::new(&format!("rules:{}", path.display()), rules))
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }
}

impl ChatModel for RuleModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        validate_messages(messages).map_err(|m| invalid(&self.id, m))?;
        let haystack = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        self.rules
            .iter()
            .find(|r| r.matches(&haystack))
            .map(|r| r.reply.clone())
            .ok_or_else(|| invalid(&self.id, "no rule matched".into()))
    }
}
