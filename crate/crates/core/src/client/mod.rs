//! OpenAI-compatible chat client with caching, bounded parallelism,
//! retries, and a deterministic mock provider.

mod batch;
mod cache;
mod transport;

pub use batch::{run_batch, ParseFailure, RunLog};
pub use cache::{cache_key, cached_complete};
pub use transport::{
    post_with_retry, HttpResponse, HttpTransport, MockHttp, MockTransport, RetryPolicy,
    Transport, TransportError,
};

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::PromptBundle;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("batch aborted: {failures} of {total} requests failed transport")]
    BatchAborted { failures: usize, total: usize },
    #[error("cache I/O at {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("API key environment variable '{0}' is not set")]
    MissingApiKey(String),
    #[error("mock script: {0}")]
    Script(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn new(role: &str, content: &str) -> Self {
        Message {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model: String,
    /// Sent as-is when `send_temperature` is true; 0 gives deterministic
    /// decoding on providers that honor it.
    pub temperature: f64,
    /// Some endpoints reject the temperature field; turning this off omits
    /// it and the run log records non-deterministic decoding.
    pub send_temperature: bool,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub parallelism: usize,
    pub api_key_env: String,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            temperature: 0.0,
            send_temperature: true,
            max_retries: 5,
            timeout_secs: 60,
            parallelism: 4,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

impl ProviderConfig {
    pub fn temperature_sent(&self) -> Option<f64> {
        if self.send_temperature {
            Some(self.temperature)
        } else {
            None
        }
    }
}

/// Chat message array for a bundle. In turn mode each few-shot example is
/// its own user/assistant exchange; in single-message mode the examples are
/// inlined ahead of the target block in one user message.
pub fn bundle_messages(bundle: &PromptBundle, single_message: bool) -> Vec<Message> {
    let mut messages = vec![Message::new("system", &bundle.system_text)];
    if single_message && !bundle.example_turns.is_empty() {
        let mut blocks: Vec<String> = bundle
            .example_turns
            .iter()
            .map(|(user, assistant)| format!("{user} {assistant}"))
            .collect();
        if !bundle.user_text.is_empty() {
            blocks.push(bundle.user_text.clone());
        }
        messages.push(Message::new("user", &blocks.join("\n\n")));
        return messages;
    }
    for (user, assistant) in &bundle.example_turns {
        messages.push(Message::new("user", user));
        messages.push(Message::new("assistant", assistant));
    }
    if !bundle.user_text.is_empty() {
        messages.push(Message::new("user", &bundle.user_text));
    }
    messages
}

/// A completion backend: the real chat endpoint or a scripted mock.
pub trait ChatProvider: Send + Sync {
    fn complete_messages(
        &self,
        messages: &[Message],
        model: &str,
        temperature: Option<f64>,
    ) -> Result<String, TransportError>;

    /// Number of completion calls served so far (mock providers track this
    /// for cache-discipline assertions; HTTP providers may return 0).
    fn call_count(&self) -> usize {
        0
    }
}

/// Chat provider speaking the `/chat/completions` wire format.
pub struct HttpChatProvider {
    transport: Box<dyn Transport>,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl HttpChatProvider {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ClientError> {
        let api_key = std::env::var(&cfg.api_key_env).ok();
        Ok(HttpChatProvider {
            transport: Box::new(HttpTransport::new(Duration::from_secs(cfg.timeout_secs))),
            base_url: cfg.base_url.clone(),
            api_key,
            retry: RetryPolicy {
                max_tries: cfg.max_retries,
                ..RetryPolicy::default()
            },
        })
    }

    /// Test hook: same wire logic over a scripted transport.
    pub fn with_transport(transport: Box<dyn Transport>, base_url: &str, retry: RetryPolicy) -> Self {
        HttpChatProvider {
            transport,
            base_url: base_url.into(),
            api_key: None,
            retry,
        }
    }
}

impl ChatProvider for HttpChatProvider {
    fn complete_messages(
        &self,
        messages: &[Message],
        model: &str,
        temperature: Option<f64>,
    ) -> Result<String, TransportError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut body = serde_json::json!({ "model": model, "messages": messages });
        if let Some(t) = temperature {
            body["temperature"] = serde_json::json!(t);
        }
        let text = post_with_retry(
            self.transport.as_ref(),
            &url,
            self.api_key.as_deref(),
            &body,
            &self.retry,
        )?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| TransportError::Protocol(format!("invalid JSON: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| {
                TransportError::Protocol("response has no choices[0].message.content".into())
            })
    }
}

#[derive(Debug, Clone)]
enum MockReply {
    Text(String),
    Fail(String),
}

/// Deterministic provider scripted by (pattern, reply) rules. A pattern
/// matches when it is "*" or a substring of the concatenated message
/// contents; first match wins, then the default.
pub struct MockChatProvider {
    rules: Vec<(String, MockReply)>,
    default: Option<MockReply>,
    calls: Mutex<Vec<String>>,
}

#[derive(Deserialize)]
struct ScriptEntry {
    #[serde(rename = "match")]
    pattern: String,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct ScriptFile {
    #[serde(default)]
    default: Option<String>,
    #[serde(default)]
    patterns: Vec<ScriptEntry>,
}

impl MockChatProvider {
    pub fn new(rules: Vec<(String, String)>, default: Option<String>) -> Self {
        MockChatProvider {
            rules: rules
                .into_iter()
                .map(|(p, r)| (p, MockReply::Text(r)))
                .collect(),
            default: default.map(MockReply::Text),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_failure(mut self, pattern: &str, error: &str) -> Self {
        self.rules
            .insert(0, (pattern.into(), MockReply::Fail(error.into())));
        self
    }

    pub fn from_script_file(path: &Path) -> Result<Self, ClientError> {
        let text = fs::read_to_string(path).map_err(|source| ClientError::Cache {
            path: path.display().to_string(),
            source,
        })?;
        let script: ScriptFile =
            serde_json::from_str(&text).map_err(|e| ClientError::Script(e.to_string()))?;
        let mut rules = Vec::new();
        for entry in script.patterns {
            let reply = match (entry.response, entry.error) {
                (Some(r), None) => MockReply::Text(r),
                (None, Some(e)) => MockReply::Fail(e),
                _ => {
                    return Err(ClientError::Script(format!(
                        "pattern '{}' must set exactly one of response/error",
                        entry.pattern
                    )))
                }
            };
            rules.push((entry.pattern, reply));
        }
        Ok(MockChatProvider {
            rules,
            default: script.default.map(MockReply::Text),
            calls: Mutex::new(Vec::new()),
        })
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }
}

impl ChatProvider for MockChatProvider {
    fn complete_messages(
        &self,
        messages: &[Message],
        _model: &str,
        _temperature: Option<f64>,
    ) -> Result<String, TransportError> {
        let haystack: String = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        self.calls.lock().unwrap().push(haystack.clone());
        let reply = self
            .rules
            .iter()
            .find(|(p, _)| p == "*" || haystack.contains(p.as_str()))
            .map(|(_, r)| r.clone())
            .or_else(|| self.default.clone());
        match reply {
            Some(MockReply::Text(t)) => Ok(t),
            Some(MockReply::Fail(e)) => Err(TransportError::Exhausted {
                attempts: 1,
                last_error: e,
            }),
            None => Err(TransportError::Protocol(
                "mock provider: no rule matched and no default set".into(),
            )),
        }
    }

    fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }
}

/// Sends one bundle to the provider and returns the raw response text.
pub fn complete(
    bundle: &PromptBundle,
    cfg: &ProviderConfig,
    provider: &dyn ChatProvider,
) -> Result<String, ClientError> {
    let messages = bundle_messages(bundle, false);
    Ok(provider.complete_messages(&messages, &cfg.model, cfg.temperature_sent())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::Strategy;

    fn bundle() -> PromptBundle {
        PromptBundle {
            strategy: Strategy::P2,
            system_text: "sys".into(),
            example_turns: vec![],
            user_text: String::new(),
        }
    }

    fn p1_bundle() -> PromptBundle {
        PromptBundle {
            strategy: Strategy::P1,
            system_text: "sys".into(),
            example_turns: vec![
                ("ex1 Rating:".into(), "1".into()),
                ("ex2 Rating:".into(), "2".into()),
            ],
            user_text: "target Rating:".into(),
        }
    }

    #[test]
    fn mock_wildcard_answers_everything() {
        let provider = MockChatProvider::new(vec![("*".into(), "3".into())], None);
        let got = complete(&bundle(), &ProviderConfig::default(), &provider).unwrap();
        assert_eq!(got, "3");
    }

    #[test]
    fn mock_error_injection_surfaces_as_transport_error() {
        let provider =
            MockChatProvider::new(vec![], Some("3".into())).with_failure("sys", "boom");
        let err = complete(&bundle(), &ProviderConfig::default(), &provider).unwrap_err();
        assert!(matches!(err, ClientError::Transport(_)));
    }

    #[test]
    fn turn_mode_message_layout() {
        let msgs = bundle_messages(&p1_bundle(), false);
        let roles: Vec<&str> = msgs.iter().map(|m| m.role.as_str()).collect();
        assert_eq!(roles, vec!["system", "user", "assistant", "user", "assistant", "user"]);
        assert_eq!(msgs.last().unwrap().content, "target Rating:");
    }

    #[test]
    fn single_message_mode_inlines_examples() {
        let msgs = bundle_messages(&p1_bundle(), true);
        assert_eq!(msgs.len(), 2);
        assert!(msgs[1].content.contains("ex1 Rating: 1"));
        assert!(msgs[1].content.contains("ex2 Rating: 2"));
        assert!(msgs[1].content.ends_with("target Rating:"));
    }

    #[test]
    fn p2_is_a_lone_system_message() {
        let msgs = bundle_messages(&bundle(), false);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].role, "system");
    }

    #[test]
    fn http_provider_parses_first_choice() {
        let body = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": " 4 "}}]
        })
        .to_string();
        let provider = HttpChatProvider::with_transport(
            Box::new(MockTransport::with_default(&body)),
            "http://stub/v1",
            RetryPolicy::immediate(3),
        );
        let got = provider
            .complete_messages(&[Message::new("system", "s")], "m", Some(0.0))
            .unwrap();
        assert_eq!(got, " 4 ");
    }

    #[test]
    fn http_provider_retries_then_succeeds() {
        let body = serde_json::json!({
            "choices": [{"message": {"content": "2"}}]
        })
        .to_string();
        let transport = MockTransport::sequence(vec![
            MockHttp::Status(429, "rate".into()),
            MockHttp::Status(429, "rate".into()),
            MockHttp::Ok(body),
        ]);
        let provider = HttpChatProvider::with_transport(
            Box::new(transport),
            "http://stub/v1",
            RetryPolicy::immediate(5),
        );
        let got = provider
            .complete_messages(&[Message::new("system", "s")], "m", Some(0.0))
            .unwrap();
        assert_eq!(got, "2");
    }

    #[test]
    fn http_provider_401_is_permanent() {
        let transport = MockTransport::sequence(vec![MockHttp::Status(401, "no".into())]);
        let provider = HttpChatProvider::with_transport(
            Box::new(transport),
            "http://stub/v1",
            RetryPolicy::immediate(5),
        );
        let err = provider
            .complete_messages(&[Message::new("system", "s")], "m", None)
            .unwrap_err();
        assert!(matches!(err, TransportError::Permanent { status: 401, .. }));
    }
}
