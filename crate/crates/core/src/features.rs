//! Embedding acquisition and the two handcrafted feature schemas (F8, F23).
//!
//! The slot orders defined here are normative for this artifact; models are
//! only comparable when trained and scored on the same schema.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{post_with_retry, RetryPolicy, Transport, TransportError};
use crate::model::Sample;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("dimensionality mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine undefined for zero-norm vector")]
    ZeroNorm,
    #[error("empty text for {0}")]
    EmptyText(&'static str),
    #[error("non-finite value in embedding '{0}'")]
    NonFinite(String),
    #[error("embeddings file missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embeddings file line {0}: {1}")]
    BadLine(usize, String),
    #[error("embeddings endpoint: {0}")]
    Endpoint(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaId {
    F8,
    F23,
}

impl SchemaId {
    pub fn width(self) -> usize {
        match self {
            SchemaId::F8 => 8,
            SchemaId::F23 => 23,
        }
    }
}

impl std::str::FromStr for SchemaId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f8" => Ok(SchemaId::F8),
            "f23" => Ok(SchemaId::F23),
            other => Err(format!("unknown feature schema '{other}' (expected f8 or f23)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub sample_id: String,
    pub schema_id: SchemaId,
    pub values: Vec<f64>,
}

/// Cosine, Euclidean, Manhattan, and dot-product similarity between two
/// embeddings of equal dimensionality.
pub fn similarity_features(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
) -> Result<(f64, f64, f64, f64), FeatureError> {
    if a.values.len() != b.values.len() {
        return Err(FeatureError::DimensionMismatch(a.values.len(), b.values.len()));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut euclid2 = 0.0;
    let mut manhattan = 0.0;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        dot += x * y;
        na += x * x;
        nb += y * y;
        euclid2 += (x - y) * (x - y);
        manhattan += (x - y).abs();
    }
    if na == 0.0 || nb == 0.0 {
        return Err(FeatureError::ZeroNorm);
    }
    let cosine = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok((cosine, euclid2.sqrt(), manhattan, dot))
}

/// Lowercase tokens split on non-alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn char_trigrams(text: &str) -> BTreeSet<Vec<char>> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    if chars.len() < 3 {
        // short strings contribute their full char sequence as one "gram"
        return std::iter::once(chars).collect();
    }
    chars.windows(3).map(|w| w.to_vec()).collect()
}

/// Word overlap count, token Jaccard, and character 3-gram Jaccard between
/// two texts.
pub fn lexical_overlap(
    story_text: &str,
    meaning_text: &str,
) -> Result<(f64, f64, f64), FeatureError> {
    if story_text.trim().is_empty() {
        return Err(FeatureError::EmptyText("story_text"));
    }
    if meaning_text.trim().is_empty() {
        return Err(FeatureError::EmptyText("meaning_text"));
    }
    let a: BTreeSet<String> = tokenize(story_text).into_iter().collect();
    let b: BTreeSet<String> = tokenize(meaning_text).into_iter().collect();
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    let jaccard = if union == 0.0 { 0.0 } else { inter / union };

    let ga = char_trigrams(story_text);
    let gb = char_trigrams(meaning_text);
    let ginter = ga.intersection(&gb).count() as f64;
    let gunion = ga.union(&gb).count() as f64;
    let char_overlap = if gunion == 0.0 { 0.0 } else { ginter / gunion };
    Ok((inter, jaccard, char_overlap))
}

/// Sentence count (runs of '.', '!', '?' collapse to one terminator) and
/// punctuation count over the fixed set {. , ; : ! ? ' " -}.
pub fn structural_features(text: &str) -> Result<(f64, f64), FeatureError> {
    if text.trim().is_empty() {
        return Err(FeatureError::EmptyText("text"));
    }
    let terminators = ['.', '!', '?'];
    let punct = ['.', ',', ';', ':', '!', '?', '\'', '"', '-'];
    let mut sentences = 0usize;
    let mut in_run = false;
    let mut punct_count = 0usize;
    for c in text.chars() {
        if punct.contains(&c) {
            punct_count += 1;
        }
        if terminators.contains(&c) {
            if !in_run {
                sentences += 1;
            }
            in_run = true;
        } else {
            in_run = false;
        }
    }
    Ok((sentences as f64, punct_count as f64))
}

fn ending_present(sample: &Sample) -> f64 {
    if sample.ending.is_some() {
        1.0
    } else {
        0.0
    }
}

/// Eight-feature schema:
/// [cosine, euclidean, dot, story_chars/1000, meaning_chars/1000,
///  ending_present, cosine*ending_present, cosine*(story_chars/1000)]
pub fn assemble_f8(
    sample: &Sample,
    e_story: &EmbeddingVector,
    e_meaning: &EmbeddingVector,
) -> Result<FeatureVector, FeatureError> {
    let (cosine, euclidean, _manhattan, dot) = similarity_features(e_story, e_meaning)?;
    let story_len = sample.story_text().chars().count() as f64 / 1000.0;
    let meaning_len = sample.judged_meaning.chars().count() as f64 / 1000.0;
    let ending = ending_present(sample);
    let values = vec![
        cosine,
        euclidean,
        dot,
        story_len,
        meaning_len,
        ending,
        cosine * ending,
        cosine * story_len,
    ];
    Ok(FeatureVector {
        sample_id: sample.id.clone(),
        schema_id: SchemaId::F8,
        values,
    })
}

/// Twenty-three-feature schema. Slot order:
///   0-3   similarity: cosine, euclidean, manhattan, dot
///   4-6   lexical overlap (story vs meaning): word_overlap, jaccard, char_overlap
///   7-10  structural: story sentence/punct counts, target-sentence sentence/punct counts
///   11-14 lengths: story_chars/1000, meaning_chars/1000, story_tokens/100, meaning_tokens/100
///   15-16 indicators: ending_present, homonym occurrences in the target sentence
///   17-22 interactions: cosine*jaccard, cosine*ending, dot*jaccard,
///         euclidean*ending, cosine*story_tokens/100, jaccard*meaning_tokens/100
pub fn assemble_f23(
    sample: &Sample,
    e_story: &EmbeddingVector,
    e_meaning: &EmbeddingVector,
) -> Result<FeatureVector, FeatureError> {
    let story = sample.story_text();
    let meaning = &sample.judged_meaning;
    let (cosine, euclidean, manhattan, dot) = similarity_features(e_story, e_meaning)?;
    let (word_overlap, jaccard, char_overlap) = lexical_overlap(&story, meaning)?;
    let (story_sent, story_punct) = structural_features(&story)?;
    let (sent_sent, sent_punct) = structural_features(&sample.sentence)?;
    let story_chars = story.chars().count() as f64 / 1000.0;
    let meaning_chars = meaning.chars().count() as f64 / 1000.0;
    let story_tokens = tokenize(&story).len() as f64 / 100.0;
    let meaning_tokens = tokenize(meaning).len() as f64 / 100.0;
    let ending = ending_present(sample);
    let homonym_lower = sample.homonym.to_lowercase();
    let homonym_count = tokenize(&sample.sentence)
        .iter()
        .filter(|t| **t == homonym_lower)
        .count() as f64;
    let values = vec![
        cosine,
        euclidean,
        manhattan,
        dot,
        word_overlap,
        jaccard,
        char_overlap,
        story_sent,
        story_punct,
        sent_sent,
        sent_punct,
        story_chars,
        meaning_chars,
        story_tokens,
        meaning_tokens,
        ending,
        homonym_count,
        cosine * jaccard,
        cosine * ending,
        dot * jaccard,
        euclidean * ending,
        cosine * story_tokens,
        jaccard * meaning_tokens,
    ];
    Ok(FeatureVector {
        sample_id: sample.id.clone(),
        schema_id: SchemaId::F23,
        values,
    })
}

/// Where embeddings come from: a JSONL file of precomputed vectors or an
/// OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    File(PathBuf),
    Endpoint {
        base_url: String,
        model: String,
        api_key: Option<String>,
    },
}

#[derive(Deserialize)]
struct EmbeddingLine {
    id: String,
    vector: Vec<f64>,
}

fn load_embeddings_file(
    path: &Path,
    ids: &[&str],
) -> Result<Vec<EmbeddingVector>, FeatureError> {
    let file = fs::File::open(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut by_id = std::collections::HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EmbeddingLine = serde_json::from_str(&line)
            .map_err(|e| FeatureError::BadLine(idx + 1, e.to_string()))?;
        if parsed.vector.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite(parsed.id));
        }
        by_id.insert(parsed.id.clone(), parsed.vector);
    }
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !by_id.contains_key(**id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(FeatureError::MissingIds(missing));
    }
    Ok(ids
        .iter()
        .map(|id| EmbeddingVector {
            id: id.to_string(),
            values: by_id[*id].clone(),
        })
        .collect())
}

fn fetch_embeddings_endpoint(
    transport: &dyn Transport,
    base_url: &str,
    model: &str,
    api_key: Option<&str>,
    texts: &[(&str, &str)],
) -> Result<Vec<EmbeddingVector>, FeatureError> {
    let url = format!("{}/embeddings", base_url.trim_end_matches('/'));
    let inputs: Vec<&str> = texts.iter().map(|(_, t)| *t).collect();
    let body = serde_json::json!({ "model": model, "input": inputs });
    let response = post_with_retry(transport, &url, api_key, &body, &RetryPolicy::default())?;
    let value: serde_json::Value = serde_json::from_str(&response)
        .map_err(|e| FeatureError::Endpoint(format!("invalid JSON response: {e}")))?;
    let data = value
        .get("data")
        .and_then(|d| d.as_array())
        .ok_or_else(|| FeatureError::Endpoint("response has no data array".into()))?;
    if data.len() != texts.len() {
        return Err(FeatureError::Endpoint(format!(
            "asked for {} embeddings, got {}",
            texts.len(),
            data.len()
        )));
    }
    // responses pair with requests by order
    texts
        .iter()
        .zip(data)
        .map(|((id, _), item)| {
            let values: Vec<f64> = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| FeatureError::Endpoint("entry has no embedding".into()))?
                .iter()
                .map(|v| v.as_f64().unwrap_or(f64::NAN))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::NonFinite(id.to_string()));
            }
            Ok(EmbeddingVector {
                id: id.to_string(),
                values,
            })
        })
        .collect()
}

/// Resolves one embedding per (id, text) pair, ordered by input index.
pub fn acquire_embeddings(
    texts: &[(&str, &str)],
    source: &EmbeddingSource,
    transport: &dyn Transport,
) -> Result<Vec<EmbeddingVector>, FeatureError> {
    match source {
        EmbeddingSource::File(path) => {
            let ids: Vec<&str> = texts.iter().map(|(id, _)| *id).collect();
            load_embeddings_file(path, &ids)
        }
        EmbeddingSource::Endpoint {
            base_url,
            model,
            api_key,
        } => fetch_embeddings_endpoint(transport, base_url, model, api_key.as_deref(), texts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn emb(id: &str, values: &[f64]) -> EmbeddingVector {
        EmbeddingVector {
            id: id.into(),
            values: values.to_vec(),
        }
    }

    fn fixture_sample(ending: Option<&str>) -> Sample {
        Sample {
            id: "fx".into(),
            homonym: "ring".into(),
            judged_meaning: "a characteristic sound".into(),
            precontext: "John smiled. He saved money. He felt ready.".into(),
            sentence: "He told his girlfriend he would give her a ring.".into(),
            ending: ending.map(str::to_string),
            gold_mean: 1.0,
            gold_std: 0.0,
            ratings: None,
        }
    }

    #[test]
    fn orthogonal_vectors() {
        let (c, e, m, d) = similarity_features(&emb("a", &[1.0, 0.0]), &emb("b", &[0.0, 1.0])).unwrap();
        assert_eq!(c, 0.0);
        assert!((e - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m, 2.0);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn identical_vectors() {
        let (c, e, m, d) = similarity_features(&emb("a", &[1.0, 1.0]), &emb("b", &[1.0, 1.0])).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        assert_eq!(e, 0.0);
        assert_eq!(m, 0.0);
        assert_eq!(d, 2.0);
    }

    #[test]
    fn hand_computed_cosine() {
        // cos([1,2],[2,1]) = 4 / (sqrt(5) * sqrt(5)) = 0.8
        let (c, _, _, d) = similarity_features(&emb("a", &[1.0, 2.0]), &emb("b", &[2.0, 1.0])).unwrap();
        assert!((c - 0.8).abs() < 1e-15);
        assert_eq!(d, 4.0);
    }

    #[test]
    fn cosine_scale_invariance_and_errors() {
        let a = emb("a", &[0.3, -1.2, 0.7]);
        let ka = emb("ka", &[0.9, -3.6, 2.1]);
        let b = emb("b", &[1.0, 0.5, -0.2]);
        let (c1, ..) = similarity_features(&a, &b).unwrap();
        let (c2, ..) = similarity_features(&ka, &b).unwrap();
        assert!((c1 - c2).abs() < 1e-12);
        assert!(matches!(
            similarity_features(&emb("z", &[0.0, 0.0, 0.0]), &b),
            Err(FeatureError::ZeroNorm)
        ));
        assert!(matches!(
            similarity_features(&a, &emb("w", &[1.0])),
            Err(FeatureError::DimensionMismatch(3, 1))
        ));
    }

    #[test]
    fn jaccard_arithmetic() {
        let (_, j, c) = lexical_overlap("a b", "b c").unwrap();
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
        assert!(c >= 0.0 && c <= 1.0);
        let (_, j1, c1) = lexical_overlap("same text", "same text").unwrap();
        assert_eq!(j1, 1.0);
        assert_eq!(c1, 1.0);
    }

    #[test]
    fn overlap_matches_brute_force_sets() {
        let a = "plausible story";
        let b = "implausible ending";
        let (w, j, _) = lexical_overlap(a, b).unwrap();
        // brute force: {plausible, story} vs {implausible, ending}
        assert_eq!(w, 0.0);
        assert_eq!(j, 0.0);
        // jaccard symmetry
        let (_, j2, c2) = lexical_overlap(b, a).unwrap();
        let (_, j1, c1) = lexical_overlap(a, b).unwrap();
        assert_eq!(j1, j2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn empty_text_errors() {
        assert!(lexical_overlap("", "x").is_err());
        assert!(lexical_overlap("x", "  ").is_err());
    }

    #[test]
    fn sentence_counting() {
        assert_eq!(structural_features("A. B! C?").unwrap().0, 3.0);
        assert_eq!(structural_features("Wait... what?").unwrap().0, 2.0);
    }

    #[test]
    fn ring_story_counts_by_hand() {
        let story = "John looked at his savings and smiled. He had been careful with his money for months. Now, he finally felt ready to make a big decision for their anniversary. He told his girlfriend he would give her a ring. John was excited to finally buy the special piece of jewelry.";
        let (sentences, punct) = structural_features(story).unwrap();
        assert_eq!(sentences, 5.0);
        // 5 periods + 1 comma, counted by hand
        assert_eq!(punct, 6.0);
    }

    #[test]
    fn f8_absent_ending_zeroes_gated_slots() {
        let s = fixture_sample(None);
        let fv = assemble_f8(&s, &emb("a", &[1.0, 2.0]), &emb("b", &[2.0, 1.0])).unwrap();
        assert_eq!(fv.values.len(), 8);
        assert_eq!(fv.values[5], 0.0);
        assert_eq!(fv.values[6], 0.0);
    }

    #[test]
    fn f8_identical_embeddings() {
        let s = fixture_sample(Some("The end."));
        let fv = assemble_f8(&s, &emb("a", &[1.0, 1.0]), &emb("b", &[1.0, 1.0])).unwrap();
        assert!((fv.values[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn f8_slot_by_slot_oracle() {
        let s = fixture_sample(Some("John bought jewelry."));
        let ea = emb("a", &[1.0, 2.0]);
        let eb = emb("b", &[2.0, 1.0]);
        let fv = assemble_f8(&s, &ea, &eb).unwrap();
        let (cos, euc, _, dot) = similarity_features(&ea, &eb).unwrap();
        let story_len = s.story_text().chars().count() as f64 / 1000.0;
        let meaning_len = s.judged_meaning.chars().count() as f64 / 1000.0;
        let expect = [cos, euc, dot, story_len, meaning_len, 1.0, cos, cos * story_len];
        for (got, want) in fv.values.iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn f23_interactions_equal_source_products() {
        let s = fixture_sample(Some("John bought jewelry."));
        let fv = assemble_f23(&s, &emb("a", &[1.0, 2.0, 0.5]), &emb("b", &[2.0, 1.0, -0.5])).unwrap();
        let v = &fv.values;
        assert_eq!(v.len(), 23);
        assert!((v[17] - v[0] * v[5]).abs() < 1e-15);
        assert!((v[18] - v[0] * v[15]).abs() < 1e-15);
        assert!((v[19] - v[3] * v[5]).abs() < 1e-15);
        assert!((v[20] - v[1] * v[15]).abs() < 1e-15);
        assert!((v[21] - v[0] * v[13]).abs() < 1e-15);
        assert!((v[22] - v[5] * v[14]).abs() < 1e-15);
    }

    #[test]
    fn f23_absent_ending_zeroes_gated_slots() {
        let s = fixture_sample(None);
        let fv = assemble_f23(&s, &emb("a", &[1.0, 2.0]), &emb("b", &[2.0, 1.0])).unwrap();
        assert_eq!(fv.values[15], 0.0);
        assert_eq!(fv.values[18], 0.0);
        assert_eq!(fv.values[20], 0.0);
    }

    #[test]
    fn extraction_is_deterministic() {
        let s = fixture_sample(Some("E."));
        let ea = emb("a", &[0.1, -0.9, 0.4]);
        let eb = emb("b", &[0.7, 0.2, -0.3]);
        assert_eq!(
            assemble_f23(&s, &ea, &eb).unwrap(),
            assemble_f23(&s, &ea, &eb).unwrap()
        );
    }

    #[test]
    fn embeddings_file_roundtrip_and_missing_id() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"x","vector":[1.0,2.0]}}"#).unwrap();
        writeln!(f, r#"{{"id":"y","vector":[3.0,4.0]}}"#).unwrap();
        let src = EmbeddingSource::File(f.path().to_path_buf());
        let transport = crate::client::MockTransport::with_default("unused");
        let got = acquire_embeddings(&[("x", "t1"), ("y", "t2")], &src, &transport).unwrap();
        assert_eq!(got[0].values, vec![1.0, 2.0]);
        assert_eq!(got[1].values, vec![3.0, 4.0]);

        let err = acquire_embeddings(&[("x", "t1"), ("z", "t3")], &src, &transport).unwrap_err();
        match err {
            FeatureError::MissingIds(ids) => assert_eq!(ids, vec!["z".to_string()]),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn endpoint_pairs_by_request_order() {
        let body = serde_json::json!({
            "data": [
                {"embedding": [0.1, 0.2]},
                {"embedding": [0.3, 0.4]}
            ]
        })
        .to_string();
        let transport = crate::client::MockTransport::with_default(&body);
        let src = EmbeddingSource::Endpoint {
            base_url: "http://stub".into(),
            model: "m".into(),
            api_key: None,
        };
        let got = acquire_embeddings(&[("a", "first"), ("b", "second")], &src, &transport).unwrap();
        assert_eq!(got[0].id, "a");
        assert_eq!(got[0].values, vec![0.1, 0.2]);
        assert_eq!(got[1].values, vec![0.3, 0.4]);
    }
}
