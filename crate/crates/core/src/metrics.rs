//! Official evaluation metrics: Spearman rank correlation, within-one-sigma
//! accuracy, and MAE.
//!
//! Ranks are computed by sort-then-average-runs, so ties receive the mean of
//! their rank positions. Predictions are never clipped here; clipping is the
//! producer's job.

use std::collections::HashMap;

use thiserror::Error;

use crate::model::{Prediction, Sample};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("spearman undefined: {0} vector is constant")]
    ConstantInput(&'static str),
    #[error("prediction '{0}' does not match any sample id")]
    UnmatchedId(String),
    #[error("duplicate prediction for sample '{0}'")]
    DuplicatePrediction(String),
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average 1-based rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(MetricsError::ConstantInput("first"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ConstantInput("second"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average-rank tie handling. Errors on
/// constant input rather than returning 0, so degenerate batches surface.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, v) in pred.iter().chain(gold.iter()).enumerate() {
        if !v.is_finite() {
            return Err(MetricsError::NonFinite(i % pred.len()));
        }
    }
    pearson(&average_ranks(pred), &average_ranks(gold))
}

/// Joins predictions to samples by id, erroring on unmatched ids and
/// duplicates. Returns (score, gold_mean, gold_std) triples in prediction
/// order.
pub fn match_predictions<'a>(
    preds: &'a [Prediction],
    samples: &'a [Sample],
) -> Result<Vec<(&'a Prediction, &'a Sample)>, MetricsError> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let sample = by_id
            .get(p.sample_id.as_str())
            .ok_or_else(|| MetricsError::UnmatchedId(p.sample_id.clone()))?;
        if seen.insert(p.sample_id.as_str(), ()).is_some() {
            return Err(MetricsError::DuplicatePrediction(p.sample_id.clone()));
        }
        out.push((p, *sample));
    }
    Ok(out)
}

/// Fraction of predictions with |score - gold_mean| <= gold_std. The
/// boundary is inclusive so sigma = 0 still accepts exact predictions.
pub fn within_std_accuracy(preds: &[Prediction], samples: &[Sample]) -> Result<f64, MetricsError> {
    let matched = match_predictions(preds, samples)?;
    if matched.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = matched
        .iter()
        .filter(|(p, s)| (p.score - s.gold_mean).abs() <= s.gold_std)
        .count();
    Ok(hits as f64 / matched.len() as f64)
}

/// Mean absolute error of predictions against gold means.
pub fn mae(preds: &[Prediction], samples: &[Sample]) -> Result<f64, MetricsError> {
    let matched = match_predictions(preds, samples)?;
    if matched.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: f64 = matched
        .iter()
        .map(|(p, s)| (p.score - s.gold_mean).abs())
        .sum();
    Ok(total / matched.len() as f64)
}
