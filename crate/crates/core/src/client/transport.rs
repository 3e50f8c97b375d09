//! HTTP transport with retry classification and exponential backoff.
//!
//! Retryable: 429, 5xx, and connection-level failures. Any other non-2xx is
//! permanent and carries the status and a body excerpt.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport exhausted after {attempts} attempts: {last_error}")]
    Exhausted { attempts: u32, last_error: String },
    #[error("permanent HTTP {status}: {body_excerpt}")]
    Permanent { status: u16, body_excerpt: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal POST-a-JSON-body abstraction so the retry logic, chat client,
/// and embeddings fetcher can all be exercised against a scripted stub.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<HttpResponse, String>;
}

/// Backoff: base * factor^attempt with +-jitter, capped at max tries.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_tries: u32,
    pub base_ms: u64,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_tries: 5,
            base_ms: 1000,
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Zero-delay variant for tests and mock runs.
    pub fn immediate(max_tries: u32) -> Self {
        RetryPolicy {
            max_tries,
            base_ms: 0,
            factor: 2.0,
            jitter: 0.0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        if self.base_ms == 0 {
            return Duration::ZERO;
        }
        let raw = self.base_ms as f64 * self.factor.powi(attempt as i32);
        let jitter = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(-self.jitter..=self.jitter)
        } else {
            0.0
        };
        Duration::from_millis((raw * (1.0 + jitter)).max(0.0) as u64)
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

/// POSTs `body`, retrying transient failures per `policy`, and returns the
/// response body on 2xx.
pub fn post_with_retry(
    transport: &dyn Transport,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
    policy: &RetryPolicy,
) -> Result<String, TransportError> {
    let mut last_error = String::new();
    for attempt in 0..policy.max_tries {
        match transport.post_json(url, api_key, body) {
            Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp.body),
            Ok(resp) if resp.status == 429 || (500..600).contains(&resp.status) => {
                last_error = format!("HTTP {}: {}", resp.status, excerpt(&resp.body));
            }
            Ok(resp) => {
                return Err(TransportError::Permanent {
                    status: resp.status,
                    body_excerpt: excerpt(&resp.body),
                })
            }
            Err(e) => last_error = e,
        }
        if attempt + 1 < policy.max_tries {
            std::thread::sleep(policy.delay(attempt));
        }
    }
    Err(TransportError::Exhausted {
        attempts: policy.max_tries,
        last_error,
    })
}

/// Real HTTP transport backed by a blocking reqwest client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("reqwest client builds");
        HttpTransport { client }
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<HttpResponse, String> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Scripted HTTP responses for one transport. `sequence` consumes replies
/// in order; once the queue empties (or with `with_default`) every call
/// gets the default reply.
#[derive(Debug, Clone)]
pub enum MockHttp {
    Ok(String),
    Status(u16, String),
    NetErr(String),
}

pub struct MockTransport {
    queue: Mutex<VecDeque<MockHttp>>,
    default: Option<MockHttp>,
    calls: Mutex<Vec<String>>,
}

impl MockTransport {
    pub fn with_default(body: &str) -> Self {
        MockTransport {
            queue: Mutex::new(VecDeque::new()),
            default: Some(MockHttp::Ok(body.to_string())),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn sequence(items: Vec<MockHttp>) -> Self {
        MockTransport {
            queue: Mutex::new(items.into()),
            default: None,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }
}

impl Transport for MockTransport {
    fn post_json(
        &self,
        _url: &str,
        _api_key: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<HttpResponse, String> {
        self.calls.lock().unwrap().push(body.to_string());
        let action = self
            .queue
            .lock()
            .unwrap()
            .pop_front()
            .or_else(|| self.default.clone())
            .unwrap_or(MockHttp::NetErr("mock transport: no scripted reply".into()));
        match action {
            MockHttp::Ok(body) => Ok(HttpResponse { status: 200, body }),
            MockHttp::Status(status, body) => Ok(HttpResponse { status, body }),
            MockHttp::NetErr(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retries_429_then_succeeds() {
        let t = MockTransport::sequence(vec![
            MockHttp::Status(429, "slow down".into()),
            MockHttp::Status(429, "slow down".into()),
            MockHttp::Ok("done".into()),
        ]);
        let body = post_with_retry(
            &t,
            "http://x",
            None,
            &serde_json::json!({}),
            &RetryPolicy::immediate(5),
        )
        .unwrap();
        assert_eq!(body, "done");
        assert_eq!(t.call_count(), 3);
    }

    #[test]
    fn permanent_401_fails_fast() {
        let t = MockTransport::sequence(vec![MockHttp::Status(401, "unauthorized".into())]);
        let err = post_with_retry(
            &t,
            "http://x",
            None,
            &serde_json::json!({}),
            &RetryPolicy::immediate(5),
        )
        .unwrap_err();
        assert!(matches!(err, TransportError::Permanent { status: 401, .. }));
        assert_eq!(t.call_count(), 1);
    }

    #[test]
    fn exhausts_on_persistent_5xx() {
        let t = MockTransport::sequence(vec![
            MockHttp::Status(500, "boom".into()),
            MockHttp::Status(503, "boom".into()),
            MockHttp::NetErr("conn reset".into()),
        ]);
        let err = post_with_retry(
            &t,
            "http://x",
            None,
            &serde_json::json!({}),
            &RetryPolicy::immediate(3),
        )
        .unwrap_err();
        match err {
            TransportError::Exhausted { attempts, last_error } => {
                assert_eq!(attempts, 3);
                assert!(last_error.contains("conn reset"));
            }
            other => panic!("unexpected: {other}"),
        }
    }
}
