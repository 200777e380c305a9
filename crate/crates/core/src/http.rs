//! Shared JSON-over-HTTP plumbing for OpenAI-compatible endpoints.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "duration_millis")]
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff
            .mul_f64(self.multiplier.powi(retry.saturating_sub(1) as i32))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, body: String, attempts: u32 },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("invalid response body: {0}")]
    Decode(String),
    #[error("failed to build HTTP client: {0}")]
    Client(String),
}

impl HttpError {
    pub fn status(&self) -> Option<u16> {
        match self {
            HttpError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

enum Attempt {
    Retryable(HttpError),
    Fatal(HttpError),
}

#[derive(Debug, Clone)]
pub struct JsonEndpoint {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

/// Outcome of a successful call: the decoded body and how many retries it took.
#[derive(Debug, Clone)]
pub struct JsonResponse {
    pub body: Value,
    pub retries: u32,
}

impl JsonEndpoint {
    pub fn new(
        url: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, HttpError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| HttpError::Client(e.to_string()))?;
        Ok(Self {
            client,
            url: url.into(),
            api_key,
            retry,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POSTs `payload`, retrying 429, 5xx, timeouts and connection failures
    /// with exponential backoff. Other statuses fail immediately.
    pub fn post(&self, payload: &Value) -> Result<JsonResponse, HttpError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.try_once(payload, attempt) {
                Ok(body) => {
                    return Ok(JsonResponse {
                        body,
                        retries: attempt - 1,
                    })
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(e)) if attempt >= attempts => return Err(e),
                Err(Attempt::Retryable(e)) => {
                    let wait = self.retry.backoff(attempt);
                    log::warn!("{}: {e}; retrying in {wait:?}", self.url);
                    thread::sleep(wait);
                }
            }
        }
    }

    fn try_once(&self, payload: &Value, attempts: u32) -> Result<Value, Attempt> {
        let mut request = self.client.post(&self.url).json(payload);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retryable(HttpError::Timeout { attempts })
            } else {
                Attempt::Retryable(HttpError::Transport {
                    message: e.to_string(),
                    attempts,
                })
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            let err = HttpError::Status {
                status: status.as_u16(),
                body,
                attempts,
            };
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                Attempt::Retryable(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        response.json::<Value>().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retryable(HttpError::Timeout { attempts })
            } else {
                Attempt::Fatal(HttpError::Decode(e.to_string()))
            }
        })
    }
}

pub(crate) mod duration_millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(1), Duration::from_secs(1));
        assert_eq!(p.backoff(2), Duration::from_secs(2));
    }
}
