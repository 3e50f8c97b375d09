//! Run configuration, config hashing, atomic file writes, and JSONL
//! artifact I/O shared by the CLI subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::model::Prediction;
use crate::prompting::{ParseMode, Strategy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    BadLine {
        path: String,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ConfigError {
    ConfigError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes via a temp file in the target directory plus an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ConfigError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Provider selection for prompt runs: the real HTTP endpoint or the
/// deterministic mock scripted from a file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ProviderSpec {
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default = "default_true")]
        send_temperature: bool,
        #[serde(default = "default_parallelism")]
        parallelism: usize,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
    },
    Mock {
        script: PathBuf,
        #[serde(default = "default_mock_model")]
        model: String,
        #[serde(default = "default_parallelism")]
        parallelism: usize,
    },
}

fn default_true() -> bool {
    true
}
fn default_parallelism() -> usize {
    4
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_mock_model() -> String {
    "mock".into()
}

impl ProviderSpec {
    pub fn model(&self) -> &str {
        match self {
            ProviderSpec::Http { model, .. } => model,
            ProviderSpec::Mock { model, .. } => model,
        }
    }

    pub fn parallelism(&self) -> usize {
        match self {
            ProviderSpec::Http { parallelism, .. } => *parallelism,
            ProviderSpec::Mock { parallelism, .. } => *parallelism,
        }
    }
}

/// End-to-end pipeline configuration. Flags override config fields;
/// `out_dir`, `cache_dir`, and parallelism are runtime concerns and do not
/// enter the config hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub schema_map: Option<PathBuf>,
    pub strategy: Strategy,
    #[serde(default = "default_parse_mode")]
    pub parse_mode: ParseMode,
    pub provider: ProviderSpec,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub system_id: Option<String>,
    /// Training data used to resolve P1 few-shot examples; defaults to
    /// `data`.
    #[serde(default)]
    pub fewshot_from: Option<PathBuf>,
}

fn default_parse_mode() -> ParseMode {
    ParseMode::Lenient
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn system_id(&self) -> String {
        self.system_id.clone().unwrap_or_else(|| {
            format!(
                "{}-{}",
                self.provider.model(),
                match self.strategy {
                    Strategy::P1 => "p1",
                    Strategy::P2 => "p2",
                }
            )
        })
    }

    /// Hash of the semantic run identity: strategy, parse mode, provider
    /// model/temperature, and seed. Runtime knobs (parallelism, dirs) are
    /// excluded so reruns at different parallelism compare bit-identical.
    pub fn config_hash(&self) -> String {
        let semantic = serde_json::json!({
            "strategy": self.strategy,
            "parse_mode": self.parse_mode,
            "model": self.provider.model(),
            "temperature": match &self.provider {
                ProviderSpec::Http { temperature, send_temperature, .. } => {
                    if *send_temperature { Some(*temperature) } else { None }
                }
                ProviderSpec::Mock { .. } => Some(0.0),
            },
            "seed": self.seed,
            "system_id": self.system_id(),
        });
        hash_json(&semantic)
    }
}

/// Stable hex digest of a JSON value's canonical serialization.
pub fn hash_json(value: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(value.to_string().as_bytes());
    hex::encode(hasher.finalize())[..16].to_string()
}

/// Sidecar provenance for line-oriented artifacts (JSONL cannot embed a
/// header without breaking its schema).
pub fn write_meta_sidecar(
    artifact: &Path,
    config_hash: &str,
    seed: u64,
) -> Result<(), ConfigError> {
    let meta = serde_json::json!({ "config_hash": config_hash, "seed": seed });
    let path = artifact.with_extension(format!(
        "{}.meta.json",
        artifact
            .extension()
            .map(|e| e.to_string_lossy().to_string())
            .unwrap_or_default()
    ));
    write_atomic(&path, serde_json::to_string_pretty(&meta).unwrap().as_bytes())
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| ConfigError::BadLine {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializes"));
        out.push('\n');
    }
    out
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureVector>, ConfigError> {
    load_jsonl(path)
}

pub fn write_features(path: &Path, features: &[FeatureVector]) -> Result<(), ConfigError> {
    write_atomic(path, to_jsonl(features).as_bytes())
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, ConfigError> {
    load_jsonl(path)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<(), ConfigError> {
    write_atomic(path, to_jsonl(preds).as_bytes())
}
