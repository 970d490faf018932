use std::sync::Arc;
use std::time::{Duration, Instant};

use super::limit::RequestGate;
use super::{validate_messages, ChatMessage, ChatModel, ClientError, ClientErrorKind, ModelEndpoint};

/// Failure of a single request attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptError {
    pub kind: ClientErrorKind,
    pub message: String,
    /// Server-suggested wait before the next attempt.
    pub retry_after: Option<Duration>,
}

impl AttemptError {
    pub fn new(kind: ClientErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            retry_after: None,
        }
    }
}

/// Performs one chat-completion request with no retrying.
pub trait ChatTransport: Send + Sync {
    fn send(
        &self,
        endpoint: &ModelEndpoint,
        messages: &[ChatMessage],
        timeout: Duration,
    ) -> Result<String, AttemptError>;
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Exponential backoff: `initial * factor^(retry-1)`, capped at `max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub factor: f64,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(250),
            factor: 2.0,
            max: Duration::from_secs(8),
        }
    }
}

impl Backoff {
    pub fn delay(&self, retry: u32) -> Duration {
        let exp = self.factor.max(1.0).powi(retry.saturating_sub(1) as i32);
        self.initial.mul_f64(exp).min(self.max)
    }
}

/// Chat client with retries, backoff and per-endpoint request gating.
///
/// The whole call, retries and waits included, is bounded by
/// `(max_retries + 1) * timeout`.
pub struct ChatClient {
    endpoint: ModelEndpoint,
    id: String,
    transport: Arc<dyn ChatTransport>,
    gate: RequestGate,
    backoff: Backoff,
    sleeper: Arc<dyn Sleeper>,
}

impl ChatClient {
    pub fn new(endpoint: ModelEndpoint, transport: Arc<dyn ChatTransport>) -> Self {
        let gate = RequestGate::new(endpoint.max_in_flight, endpoint.requests_per_second);
        Self {
            id: endpoint.identity(),
            endpoint,
            transport,
            gate,
            backoff: Backoff::default(),
            sleeper: Arc::new(ThreadSleeper),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    pub fn chat_complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        validate_messages(messages)
            .map_err(|m| ClientError::new(ClientErrorKind::InvalidRequest, &self.id, 0, m))?;
        let timeout = self.endpoint.timeout();
        let budget = timeout * (self.endpoint.max_retries + 1);
        let started = Instant::now();
        let mut prev_delay = Duration::ZERO;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let remaining = budget.saturating_sub(started.elapsed());
            if remaining.is_zero() {
                return Err(ClientError::new(
                    ClientErrorKind::Timeout,
                    &self.id,
                    attempt - 1,
                    "retry budget exhausted",
                ));
            }
            let result = {
                let _permit = self.gate.acquire();
                self.transport
                    .send(&self.endpoint, messages, timeout.min(remaining))
            };
            let err = match result {
                Ok(text) => return Ok(text),
                Err(e) => e,
            };
            if !err.kind.is_transient() || attempt > self.endpoint.max_retries {
                return Err(ClientError::new(err.kind, &self.id, attempt, err.message));
            }
            let mut delay = self.backoff.delay(attempt).max(prev_delay);
            if let Some(hint) = err.retry_after {
                delay = delay.max(hint);
            }
            prev_delay = delay;
            let remaining = budget.saturating_sub(started.elapsed());
            tracing::debug!(endpoint = %self.id, attempt, ?delay, kind = %err.kind, "retrying");
            self.sleeper.sleep(delay.min(remaining));
        }
    }
}

impl ChatModel for ChatClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        self.chat_complete(messages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::Role;
    use std::sync::Mutex;

    /// Fails with `kind` for the first `failures` attempts, then echoes.
    struct Flaky {
        failures: u32,
        kind: ClientErrorKind,
        calls: Mutex<u32>,
    }

    impl ChatTransport for Flaky {
        fn send(
            &self,
            _: &ModelEndpoint,
            messages: &[ChatMessage],
            _: Duration,
        ) -> Result<String, AttemptError> {
            let mut n = self.calls.lock().unwrap();
            *n += 1;
            if *n <= self.failures {
                Err(AttemptError::new(self.kind, "scripted failure"))
            } else {
                let last = messages.iter().rev().find(|m| m.role == Role::User).unwrap();
                Ok(last.content.clone())
            }
        }
    }

    #[derive(Default)]
    struct Recorder(Mutex<Vec<Duration>>);

    impl Sleeper for Recorder {
        fn sleep(&self, d: Duration) {
            self.0.lock().unwrap().push(d);
        }
    }

    fn client(failures: u32, kind: ClientErrorKind, max_retries: u32) -> (ChatClient, Arc<Flaky>, Arc<Recorder>) {
        let transport = Arc::new(Flaky {
            failures,
            kind,
            calls: Mutex::new(0),
        });
        let sleeper = Arc::new(Recorder::default());
        let ep = ModelEndpoint {
            max_retries,
            ..Default::default()
        };
        let c = ChatClient::new(ep, transport.clone()).with_sleeper(sleeper.clone());
        (c, transport, sleeper)
    }

    #[test]
    fn echoes_on_first_success() {
        let (c, t, _) = client(0, ClientErrorKind::Timeout, 3);
        let out = c.chat_complete(&[ChatMessage::system("s"), ChatMessage::user("hello")]).unwrap();
        assert_eq!(out, "hello");
        assert_eq!(*t.calls.lock().unwrap(), 1);
    }

    #[test]
    fn succeeds_after_two_failures() {
        let (c, t, s) = client(2, ClientErrorKind::Unavailable, 3);
        assert_eq!(c.chat_complete(&[ChatMessage::user("x")]).unwrap(), "x");
        assert_eq!(*t.calls.lock().unwrap(), 3);
        assert_eq!(s.0.lock().unwrap().len(), 2);
    }

    #[test]
    fn exhausts_retries_with_timeout() {
        let (c, t, _) = client(u32::MAX, ClientErrorKind::Timeout, 1);
        let err = c.chat_complete(&[ChatMessage::user("x")]).unwrap_err();
        assert_eq!(err.kind, ClientErrorKind::Timeout);
        assert_eq!(err.attempts, 2);
        assert_eq!(*t.calls.lock().unwrap(), 2);
        assert!(err.endpoint.contains("default"));
    }

    #[test]
    fn auth_failures_are_not_retried() {
        let (c, t, _) = client(u32::MAX, ClientErrorKind::AuthFailure, 5);
        let err = c.chat_complete(&[ChatMessage::user("x")]).unwrap_err();
        assert_eq!(err.kind, ClientErrorKind::AuthFailure);
        assert_eq!(err.attempts, 1);
        assert_eq!(*t.calls.lock().unwrap(), 1);
    }

    #[test]
    fn backoff_delays_are_monotone_and_bounded() {
        let (c, t, s) = client(u32::MAX, ClientErrorKind::RateLimited, 6);
        let _ = c.chat_complete(&[ChatMessage::user("x")]);
        assert_eq!(*t.calls.lock().unwrap(), 7);
        let delays = s.0.lock().unwrap().clone();
        assert_eq!(delays.len(), 6);
        assert!(delays.windows(2).all(|w| w[0] <= w[1]), "{delays:?}");
        assert_eq!(delays[0], Duration::from_millis(250));
        assert!(delays.iter().all(|d| *d <= Duration::from_secs(8)));
    }

    #[test]
    fn rejects_bad_requests_without_calling() {
        let (c, t, _) = client(0, ClientErrorKind::Timeout, 3);
        let err = c.chat_complete(&[ChatMessage::assistant("x")]).unwrap_err();
        assert_eq!(err.kind, ClientErrorKind::InvalidRequest);
        assert_eq!(*t.calls.lock().unwrap(), 0);
    }

    #[test]
    fn backoff_schedule() {
        let b = Backoff::default();
        assert_eq!(b.delay(1), Duration::from_millis(250));
        assert_eq!(b.delay(2), Duration::from_millis(500));
        assert_eq!(b.delay(10), Duration::from_secs(8));
    }
}
