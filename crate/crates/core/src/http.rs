//! Shared plumbing for the chat and embedding endpoints: endpoint settings,
//! transport errors and the retry loop.

use std::thread;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("request failed: {0}")]
    Request(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: Box<TransportError> },
}

/// URL, model name and key for one OpenAI-compatible endpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub key: String,
}

impl EndpointConfig {
    /// Reads `<PREFIX>_URL`, `<PREFIX>_MODEL` and `<PREFIX>_KEY`; names the first one missing.
    pub fn from_env(prefix: &str) -> Result<Self, String> {
        let var = |suffix: &str| {
            let name = format!("{prefix}_{suffix}");
            std::env::var(&name).ok().filter(|v| !v.is_empty()).ok_or(name)
        };
        Ok(Self {
            url: var("URL")?,
            model: var("MODEL")?,
            key: var("KEY")?,
        })
    }
}

/// Attempt count and first backoff; later waits double.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, TransportError>) -> Result<T, TransportError> {
        let attempts = self.attempts.max(1);
        let mut wait = self.initial_backoff;
        let mut last = None;
        for attempt in 1..=attempts {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("attempt {attempt}/{attempts} failed: {e}");
                    last = Some(e);
                    if attempt < attempts {
                        thread::sleep(wait);
                        wait *= 2;
                    }
                }
            }
        }
        Err(TransportError::Exhausted {
            attempts,
            last: Box::new(last.expect("at least one attempt")),
        })
    }
}

pub(crate) fn blocking_client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .expect("http client")
}

pub(crate) fn post_json(
    client: &reqwest::blocking::Client,
    endpoint: &EndpointConfig,
    body: &serde_json::Value,
) -> Result<serde_json::Value, TransportError> {
    let response = client
        .post(&endpoint.url)
        .bearer_auth(&endpoint.key)
        .json(body)
        .send()
        .map_err(|e| TransportError::Request(e.to_string()))?;
    let status = response.status();
    if !status.is_success() {
        let body = response.text().unwrap_or_default();
        return Err(TransportError::Status {
            status: status.as_u16(),
            body,
        });
    }
    response.json().map_err(|e| TransportError::Decode(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_then_gives_up() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::ZERO,
        };
        let r: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(TransportError::Request("refused".into()))
        });
        assert_eq!(calls.get(), 3);
        assert!(matches!(r, Err(TransportError::Exhausted { attempts: 3, .. })));

        calls.set(0);
        let r = policy.run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Err(TransportError::Request("flaky".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));
        assert_eq!(calls.get(), 2);
    }
}
