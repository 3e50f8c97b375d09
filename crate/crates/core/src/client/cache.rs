//! Response cache: one file per key, filename = content hash, content = raw
//! response text. Writers go through a temp file and an atomic rename, so
//! concurrent writers are safe and the first one wins.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{complete, ChatProvider, ClientError, Message, ProviderConfig};
use crate::prompting::PromptBundle;

/// Hash of (model, serialized messages, temperature). Any prompt or
/// decoding change invalidates naturally.
pub fn cache_key(model: &str, messages: &[Message], temperature: Option<f64>) -> String {
    let payload = serde_json::json!({
        "model": model,
        "messages": messages,
        "temperature": temperature,
    });
    let mut hasher = Sha256::new();
    hasher.update(payload.to_string().as_bytes());
    hex::encode(hasher.finalize())
}

fn io_err(path: &Path, source: std::io::Error) -> ClientError {
    ClientError::Cache {
        path: path.display().to_string(),
        source,
    }
}

/// Returns the cached response for this bundle, calling the provider only
/// on a miss. The flag reports whether the cache was hit.
pub fn cached_complete(
    bundle: &PromptBundle,
    cfg: &ProviderConfig,
    provider: &dyn ChatProvider,
    cache_dir: &Path,
) -> Result<(String, bool), ClientError> {
    let messages = super::bundle_messages(bundle, false);
    let key = cache_key(&cfg.model, &messages, cfg.temperature_sent());
    let path = cache_dir.join(&key);
    if path.exists() {
        match fs::read(&path) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(text) => return Ok((text, true)),
                Err(_) => {
                    eprintln!("warning: corrupt cache entry {key}, refetching");
                }
            },
            Err(e) => return Err(io_err(&path, e)),
        }
    }
    let text = complete(bundle, cfg, provider)?;
    fs::create_dir_all(cache_dir).map_err(|e| io_err(cache_dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(cache_dir).map_err(|e| io_err(cache_dir, e))?;
    tmp.write_all(text.as_bytes()).map_err(|e| io_err(&path, e))?;
    match tmp.persist(&path) {
        Ok(_) => {}
        Err(e) => return Err(io_err(&path, e.error)),
    }
    Ok((text, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::MockChatProvider;
    use crate::prompting::{PromptBundle, Strategy};

    fn bundle(text: &str) -> PromptBundle {
        PromptBundle {
            strategy: Strategy::P2,
            system_text: text.into(),
            example_turns: vec![],
            user_text: String::new(),
        }
    }

    #[test]
    fn second_call_is_a_hit_with_no_provider_call() {
        let dir = tempfile::tempdir().unwrap();
        let provider = MockChatProvider::new(vec![("*".into(), "3".into())], None);
        let cfg = ProviderConfig::default();
        let b = bundle("hello");
        let (t1, hit1) = cached_complete(&b, &cfg, &provider, dir.path()).unwrap();
        let (t2, hit2) = cached_complete(&b, &cfg, &provider, dir.path()).unwrap();
        assert_eq!(t1, "3");
        assert_eq!(t2, "3");
        assert!(!hit1);
        assert!(hit2);
        assert_eq!(provider.call_count(), 1);
    }

    #[test]
    fn different_model_gets_different_key() {
        let msgs = vec![Message::new("system", "x")];
        let k1 = cache_key("model-a", &msgs, Some(0.0));
        let k2 = cache_key("model-b", &msgs, Some(0.0));
        assert_ne!(k1, k2);
        let k3 = cache_key("model-a", &msgs, None);
        assert_ne!(k1, k3);
    }

    #[test]
    fn key_uniqueness_and_round_trip_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ProviderConfig::default();
        let mut keys = std::collections::HashSet::new();
        for i in 0..100 {
            let b = bundle(&format!("prompt variant {i}"));
            let provider =
                MockChatProvider::new(vec![("*".into(), format!("resp {i}"))], None);
            let msgs = crate::client::bundle_messages(&b, false);
            assert!(keys.insert(cache_key(&cfg.model, &msgs, cfg.temperature_sent())));
            let (text, hit) = cached_complete(&b, &cfg, &provider, dir.path()).unwrap();
            assert!(!hit);
            assert_eq!(text, format!("resp {i}"));
            let (text2, hit2) = cached_complete(&b, &cfg, &provider, dir.path()).unwrap();
            assert!(hit2);
            assert_eq!(text2, text);
        }
        assert_eq!(keys.len(), 100);
    }

    #[test]
    fn corrupt_entry_is_refetched() {
        let dir = tempfile::tempdir().unwrap();
        let provider = MockChatProvider::new(vec![("*".into(), "5".into())], None);
        let cfg = ProviderConfig::default();
        let b = bundle("x");
        let msgs = crate::client::bundle_messages(&b, false);
        let key = cache_key(&cfg.model, &msgs, cfg.temperature_sent());
        std::fs::write(dir.path().join(&key), [0xff, 0xfe, 0x00]).unwrap();
        let (text, hit) = cached_complete(&b, &cfg, &provider, dir.path()).unwrap();
        assert_eq!(text, "5");
        assert!(!hit);
        // replaced with valid content
        let (_, hit2) = cached_complete(&b, &cfg, &provider, dir.path()).unwrap();
        assert!(hit2);
    }
}
