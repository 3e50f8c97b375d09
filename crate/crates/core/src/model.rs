//! Domain types, dataset ingestion, schema mapping, and validation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {source}")]
    MalformedLine {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing mapped field '{field}' (source name '{source_name}')")]
    MissingField {
        line: usize,
        field: String,
        source_name: String,
    },
    #[error("line {line}: field '{field}' has wrong type, expected {expected}")]
    WrongType {
        line: usize,
        field: String,
        expected: &'static str,
    },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("schema map: {0}")]
    SchemaMap(String),
    #[error("holdout fraction {0} out of range (0, 0.5)")]
    BadFraction(f64),
    #[error("need at least 10 samples to split, got {0}")]
    TooFewSamples(usize),
}

/// One narrative item: a homonym, a candidate sense, the story, and the
/// gold annotator statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub homonym: String,
    pub judged_meaning: String,
    /// Three-sentence narrative setup, stored as one block.
    pub precontext: String,
    /// The sentence containing the homonym.
    pub sentence: String,
    /// Concluding sentence; absent endings render as the literal "none"
    /// downstream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ending: Option<String>,
    /// Mean annotator rating in [1, 5].
    pub gold_mean: f64,
    /// Population standard deviation of the annotator ratings.
    pub gold_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<Vec<i64>>,
}

impl Sample {
    /// Full story text: precontext + sentence + ending joined with single
    /// spaces, ending omitted when absent.
    pub fn story_text(&self) -> String {
        match &self.ending {
            Some(e) => format!("{} {} {}", self.precontext, self.sentence, e),
            None => format!("{} {}", self.precontext, self.sentence),
        }
    }

    fn validate(&self, line: usize) -> Result<(), ModelError> {
        let err = |message: String| ModelError::Validation { line, message };
        if self.homonym.trim().is_empty() {
            return Err(err("homonym is empty".into()));
        }
        if self.judged_meaning.trim().is_empty() {
            return Err(err("judged_meaning is empty".into()));
        }
        if self.sentence.trim().is_empty() {
            return Err(err("sentence is empty".into()));
        }
        if !(1.0..=5.0).contains(&self.gold_mean) {
            return Err(err(format!(
                "gold_mean {} outside [1, 5]",
                self.gold_mean
            )));
        }
        if !self.gold_std.is_finite() || self.gold_std < 0.0 {
            return Err(err(format!("gold_std {} must be >= 0", self.gold_std)));
        }
        if let Some(ratings) = &self.ratings {
            if ratings.len() < 5 {
                return Err(err(format!(
                    "ratings must have >= 5 entries, got {}",
                    ratings.len()
                )));
            }
            if ratings.iter().any(|r| !(1..=5).contains(r)) {
                return Err(err("ratings must all lie in [1, 5]".into()));
            }
            let n = ratings.len() as f64;
            let mean = ratings.iter().sum::<i64>() as f64 / n;
            if (mean - self.gold_mean).abs() > 1e-6 {
                return Err(err(format!(
                    "mean of ratings {mean} disagrees with gold_mean {}",
                    self.gold_mean
                )));
            }
            let var = ratings
                .iter()
                .map(|&r| (r as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = var.sqrt();
            if (std - self.gold_std).abs() > 1e-6 {
                return Err(err(format!(
                    "population std of ratings {std} disagrees with gold_std {}",
                    self.gold_std
                )));
            }
        }
        Ok(())
    }
}

/// One system's score for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub score: f64,
    #[serde(rename = "system")]
    pub system_id: String,
    #[serde(rename = "raw", default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

const REQUIRED_FIELDS: &[&str] = &[
    "id",
    "homonym",
    "judged_meaning",
    "precontext",
    "sentence",
    "gold_mean",
    "gold_std",
];
const OPTIONAL_FIELDS: &[&str] = &["ending", "ratings"];

/// Maps canonical field names to the field names used by a source file, so
/// upstream releases with different schemas can be ingested without code
/// changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaMap {
    mapping: BTreeMap<String, String>,
}

impl Default for SchemaMap {
    fn default() -> Self {
        Self::identity()
    }
}

impl SchemaMap {
    /// Canonical names map to themselves.
    pub fn identity() -> Self {
        let mapping = REQUIRED_FIELDS
            .iter()
            .chain(OPTIONAL_FIELDS)
            .map(|f| (f.to_string(), f.to_string()))
            .collect();
        SchemaMap { mapping }
    }

    pub fn new(mapping: BTreeMap<String, String>) -> Result<Self, ModelError> {
        for field in REQUIRED_FIELDS {
            if !mapping.contains_key(*field) {
                return Err(ModelError::SchemaMap(format!(
                    "required canonical field '{field}' is not mapped"
                )));
            }
        }
        for key in mapping.keys() {
            if !REQUIRED_FIELDS.contains(&key.as_str())
                && !OPTIONAL_FIELDS.contains(&key.as_str())
            {
                return Err(ModelError::SchemaMap(format!(
                    "unknown canonical field '{key}'"
                )));
            }
        }
        let mut targets: Vec<&String> = mapping.values().collect();
        targets.sort();
        targets.dedup();
        if targets.len() != mapping.len() {
            return Err(ModelError::SchemaMap(
                "duplicate target field names in mapping".into(),
            ));
        }
        Ok(SchemaMap { mapping })
    }

    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mapping: BTreeMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| ModelError::SchemaMap(format!("invalid schema map JSON: {e}")))?;
        Self::new(mapping)
    }

    fn source_name<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.mapping
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }
}

/// Loads and validates samples from a JSONL file, one JSON object per line.
/// Field names in the file are translated through `map`. Whitespace-only
/// lines are ignored; order is preserved.
pub fn load_samples(path: &Path, map: &SchemaMap) -> Result<Vec<Sample>, ModelError> {
    let file = fs::File::open(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|source| ModelError::MalformedLine {
                line: line_no,
                source,
            })?;
        let sample = sample_from_value(&value, map, line_no)?;
        sample.validate(line_no)?;
        samples.push(sample);
    }
    Ok(samples)
}

fn sample_from_value(
    value: &serde_json::Value,
    map: &SchemaMap,
    line: usize,
) -> Result<Sample, ModelError> {
    let get_required = |canonical: &str| -> Result<&serde_json::Value, ModelError> {
        let source_name = map.source_name(canonical);
        value.get(source_name).ok_or_else(|| ModelError::MissingField {
            line,
            field: canonical.to_string(),
            source_name: source_name.to_string(),
        })
    };
    let get_string = |canonical: &str| -> Result<String, ModelError> {
        get_required(canonical)?
            .as_str()
            .map(str::to_string)
            .ok_or(ModelError::WrongType {
                line,
                field: canonical.to_string(),
                expected: "string",
            })
    };
    let get_real = |canonical: &str| -> Result<f64, ModelError> {
        get_required(canonical)?.as_f64().ok_or(ModelError::WrongType {
            line,
            field: canonical.to_string(),
            expected: "number",
        })
    };

    let ending = match value.get(map.source_name("ending")) {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) if s.trim().is_empty() => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(ModelError::WrongType {
                line,
                field: "ending".into(),
                expected: "string or null",
            })
        }
    };
    let ratings = match value.get(map.source_name("ratings")) {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<Vec<i64>>(v.clone()).map_err(|_| ModelError::WrongType {
                line,
                field: "ratings".into(),
                expected: "array of integers",
            })?,
        ),
    };

    Ok(Sample {
        id: get_string("id")?,
        homonym: get_string("homonym")?,
        judged_meaning: get_string("judged_meaning")?,
        precontext: get_string("precontext")?,
        sentence: get_string("sentence")?,
        ending,
        gold_mean: get_real("gold_mean")?,
        gold_std: get_real("gold_std")?,
        ratings,
    })
}

/// Serializes samples back to canonical JSONL.
pub fn to_canonical_jsonl(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

/// Carves a deterministic internal validation split. Validation size is
/// `round(holdout_fraction * n)`; both halves keep the original sample
/// order.
pub fn split_train_internal(
    samples: &[Sample],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), ModelError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 0.5) {
        return Err(ModelError::BadFraction(holdout_fraction));
    }
    if samples.len() < 10 {
        return Err(ModelError::TooFewSamples(samples.len()));
    }
    let n = samples.len();
    let val_size = (holdout_fraction * n as f64).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut val_idx: Vec<usize> = indices[..val_size].to_vec();
    let mut train_idx: Vec<usize> = indices[val_size..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let train = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val = val_idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((train, val))
}
