//! Error analysis: bucketed MAE over gold-rating ranges, the annotator
//! disagreement split, histogram exports, worst-case listings, and the
//! consolidated evaluation report.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsError};
use crate::model::{Prediction, Sample};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("buckets must partition [1, 5]: {0}")]
    BadBuckets(String),
    #[error("disagreement threshold {0} must be > 0")]
    BadThreshold(f64),
    #[error("missing predictions for samples: {}", .0.join(", "))]
    IncompleteCoverage(Vec<String>),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One gold-rating bucket [lo, hi), upper-inclusive only when flagged
/// (the last bucket ends at 5.0 inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub inclusive_hi: bool,
    /// Absent for empty buckets rather than a fabricated 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    pub n: usize,
}

/// Default bucket edges. The middle bucket [2.5, 3.5) fills the gap
/// between the three reported ranges.
pub const DEFAULT_BUCKET_EDGES: [f64; 5] = [1.0, 2.5, 3.5, 4.5, 5.0];

fn buckets_from_edges(edges: &[f64]) -> Result<Vec<Bucket>, AnalysisError> {
    if edges.len() < 2 {
        return Err(AnalysisError::BadBuckets("need at least two edges".into()));
    }
    if (edges[0] - 1.0).abs() > 1e-12 || (edges[edges.len() - 1] - 5.0).abs() > 1e-12 {
        return Err(AnalysisError::BadBuckets(format!(
            "edges must start at 1.0 and end at 5.0, got {edges:?}"
        )));
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AnalysisError::BadBuckets("edges must strictly increase".into()));
    }
    Ok(edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let last = i == edges.len() - 2;
            Bucket {
                label: if last {
                    format!("[{}, {}]", w[0], w[1])
                } else {
                    format!("[{}, {})", w[0], w[1])
                },
                lo: w[0],
                hi: w[1],
                inclusive_hi: last,
                mae: None,
                n: 0,
            }
        })
        .collect())
}

fn bucket_index(buckets: &[Bucket], gold: f64) -> Option<usize> {
    buckets.iter().position(|b| {
        gold >= b.lo && (gold < b.hi || (b.inclusive_hi && gold <= b.hi))
    })
}

/// Per-bucket MAE and counts, assigning each sample by its gold mean.
pub fn bucketed_mae(
    preds: &[Prediction],
    samples: &[Sample],
    edges: &[f64],
) -> Result<Vec<Bucket>, AnalysisError> {
    let mut buckets = buckets_from_edges(edges)?;
    let matched = metrics::match_predictions(preds, samples)?;
    let mut sums = vec![0.0; buckets.len()];
    for (p, s) in matched {
        let idx = bucket_index(&buckets, s.gold_mean)
            .expect("gold_mean in [1,5] always lands in a partition bucket");
        sums[idx] += (p.score - s.gold_mean).abs();
        buckets[idx].n += 1;
    }
    for (b, sum) in buckets.iter_mut().zip(sums) {
        if b.n > 0 {
            b.mae = Some(sum / b.n as f64);
        }
    }
    Ok(buckets)
}

/// MAE on either side of the annotator-disagreement threshold; the high
/// side is sigma >= threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementSplit {
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub high_mae: Option<f64>,
    pub high_n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub low_mae: Option<f64>,
    pub low_n: usize,
}

pub fn disagreement_split(
    preds: &[Prediction],
    samples: &[Sample],
    threshold: f64,
) -> Result<DisagreementSplit, AnalysisError> {
    if threshold <= 0.0 {
        return Err(AnalysisError::BadThreshold(threshold));
    }
    let matched = metrics::match_predictions(preds, samples)?;
    let (mut high_sum, mut high_n) = (0.0, 0usize);
    let (mut low_sum, mut low_n) = (0.0, 0usize);
    for (p, s) in matched {
        let err = (p.score - s.gold_mean).abs();
        if s.gold_std >= threshold {
            high_sum += err;
            high_n += 1;
        } else {
            low_sum += err;
            low_n += 1;
        }
    }
    Ok(DisagreementSplit {
        threshold,
        high_mae: (high_n > 0).then(|| high_sum / high_n as f64),
        high_n,
        low_mae: (low_n > 0).then(|| low_sum / low_n as f64),
        low_n,
    })
}

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.25;

/// Gold and prediction histograms over [1, 5] with 0.25-wide bins, as CSV
/// `bin_lo,bin_hi,gold_count,pred_count`. Fine enough bins to expose
/// integer clustering in predictions.
pub fn distributions_csv(preds: &[Prediction], samples: &[Sample]) -> Result<String, AnalysisError> {
    let matched = metrics::match_predictions(preds, samples)?;
    let bins = ((5.0 - 1.0) / HISTOGRAM_BIN_WIDTH) as usize;
    let mut gold_counts = vec![0usize; bins];
    let mut pred_counts = vec![0usize; bins];
    let assign = |v: f64| -> usize {
        (((v - 1.0) / HISTOGRAM_BIN_WIDTH) as usize).min(bins - 1)
    };
    for (p, s) in matched {
        gold_counts[assign(s.gold_mean)] += 1;
        pred_counts[assign(p.score.clamp(1.0, 5.0))] += 1;
    }
    let mut out = String::from("bin_lo,bin_hi,gold_count,pred_count\n");
    for i in 0..bins {
        let lo = 1.0 + i as f64 * HISTOGRAM_BIN_WIDTH;
        let hi = lo + HISTOGRAM_BIN_WIDTH;
        out.push_str(&format!("{lo},{hi},{},{}\n", gold_counts[i], pred_counts[i]));
    }
    Ok(out)
}

pub fn export_distributions(
    preds: &[Prediction],
    samples: &[Sample],
    out_path: &Path,
) -> Result<(), AnalysisError> {
    let csv = distributions_csv(preds, samples)?;
    std::fs::write(out_path, csv).map_err(|source| AnalysisError::Io {
        path: out_path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstCase {
    pub sample: Sample,
    pub prediction: f64,
    pub abs_err: f64,
}

/// Top-k samples by absolute error, descending; ties break on the smaller
/// id. Full narrative fields are kept for manual inspection.
pub fn worst_cases(
    preds: &[Prediction],
    samples: &[Sample],
    k: usize,
) -> Result<Vec<WorstCase>, AnalysisError> {
    let matched = metrics::match_predictions(preds, samples)?;
    let mut cases: Vec<WorstCase> = matched
        .into_iter()
        .map(|(p, s)| WorstCase {
            sample: s.clone(),
            prediction: p.score,
            abs_err: (p.score - s.gold_mean).abs(),
        })
        .collect();
    cases.sort_by(|a, b| {
        b.abs_err
            .partial_cmp(&a.abs_err)
            .unwrap()
            .then_with(|| a.sample.id.cmp(&b.sample.id))
    });
    cases.truncate(k);
    Ok(cases)
}

/// The consolidated report for one system over one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub system_id: String,
    pub n: usize,
    pub spearman: f64,
    pub accuracy: f64,
    pub mae: f64,
    pub buckets: Vec<Bucket>,
    pub disagreement: DisagreementSplit,
    pub parse_failure_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Composes metrics, buckets, and the disagreement split. Requires a
/// prediction for every sample.
pub fn build_report(
    preds: &[Prediction],
    samples: &[Sample],
    system_id: &str,
    parse_failure_count: usize,
) -> Result<EvalReport, AnalysisError> {
    let covered: std::collections::HashSet<&str> =
        preds.iter().map(|p| p.sample_id.as_str()).collect();
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| !covered.contains(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(AnalysisError::IncompleteCoverage(missing));
    }
    let matched = metrics::match_predictions(preds, samples)?;
    // metric inputs in id order so the report is permutation-invariant
    let mut ordered: Vec<_> = matched;
    ordered.sort_by(|a, b| a.1.id.cmp(&b.1.id));
    let scores: Vec<f64> = ordered.iter().map(|(p, _)| p.score).collect();
    let golds: Vec<f64> = ordered.iter().map(|(_, s)| s.gold_mean).collect();
    Ok(EvalReport {
        system_id: system_id.to_string(),
        n: preds.len(),
        spearman: metrics::spearman(&scores, &golds)?,
        accuracy: metrics::within_std_accuracy(preds, samples)?,
        mae: metrics::mae(preds, samples)?,
        buckets: bucketed_mae(preds, samples, &DEFAULT_BUCKET_EDGES)?,
        disagreement: disagreement_split(preds, samples, 1.0)?,
        parse_failure_count,
        config_hash: None,
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, mean: f64, std: f64) -> Sample {
        Sample {
            id: id.into(),
            homonym: "h".into(),
            judged_meaning: "m".into(),
            precontext: "P.".into(),
            sentence: "S.".into(),
            ending: None,
            gold_mean: mean,
            gold_std: std,
            ratings: None,
        }
    }

    fn pred(id: &str, score: f64) -> Prediction {
        Prediction {
            sample_id: id.into(),
            score,
            system_id: "t".into(),
            raw_response: None,
        }
    }

    #[test]
    fn bucket_boundaries() {
        let samples = vec![sample("a", 3.5, 0.0), sample("b", 5.0, 0.0), sample("c", 2.5, 0.0)];
        let preds = vec![pred("a", 3.5), pred("b", 5.0), pred("c", 2.5)];
        let buckets = bucketed_mae(&preds, &samples, &DEFAULT_BUCKET_EDGES).unwrap();
        assert_eq!(buckets[2].n, 1); // 3.5 lands in [3.5, 4.5)
        assert_eq!(buckets[3].n, 1); // 5.0 lands in [4.5, 5.0]
        assert_eq!(buckets[1].n, 1); // 2.5 lands in [2.5, 3.5)
    }

    #[test]
    fn bucket_counts_sum_to_n_and_match_flat_oracle() {
        let samples: Vec<Sample> = (0..100)
            .map(|i| sample(&format!("s{i:03}"), 1.0 + 4.0 * (i as f64 / 99.0), 0.0))
            .collect();
        let preds: Vec<Prediction> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| pred(&s.id, (s.gold_mean + if i % 2 == 0 { 0.3 } else { -0.6 }).clamp(1.0, 5.0)))
            .collect();
        let buckets = bucketed_mae(&preds, &samples, &DEFAULT_BUCKET_EDGES).unwrap();
        assert_eq!(buckets.iter().map(|b| b.n).sum::<usize>(), 100);
        // flat group-by oracle
        for b in &buckets {
            let group: Vec<(f64, f64)> = samples
                .iter()
                .zip(&preds)
                .filter(|(s, _)| {
                    s.gold_mean >= b.lo
                        && (s.gold_mean < b.hi || (b.inclusive_hi && s.gold_mean <= b.hi))
                })
                .map(|(s, p)| (p.score, s.gold_mean))
                .collect();
            assert_eq!(group.len(), b.n);
            if let Some(mae) = b.mae {
                let oracle: f64 =
                    group.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / group.len() as f64;
                assert!((mae - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_partitioning_buckets_error() {
        let samples = vec![sample("a", 3.0, 0.0)];
        let preds = vec![pred("a", 3.0)];
        assert!(bucketed_mae(&preds, &samples, &[1.0, 4.0]).is_err());
        assert!(bucketed_mae(&preds, &samples, &[1.0, 3.0, 2.0, 5.0]).is_err());
    }

    #[test]
    fn split_boundary_sigma_goes_high() {
        let samples = vec![sample("a", 3.0, 1.0), sample("b", 3.0, 0.99)];
        let preds = vec![pred("a", 3.5), pred("b", 3.5)];
        let split = disagreement_split(&preds, &samples, 1.0).unwrap();
        assert_eq!(split.high_n, 1);
        assert_eq!(split.low_n, 1);
    }

    #[test]
    fn split_all_low_reports_absent_high_mae() {
        let samples = vec![sample("a", 3.0, 0.0), sample("b", 2.0, 0.0)];
        let preds = vec![pred("a", 3.0), pred("b", 2.0)];
        let split = disagreement_split(&preds, &samples, 1.0).unwrap();
        assert_eq!(split.high_n, 0);
        assert!(split.high_mae.is_none());
        assert_eq!(split.low_mae, Some(0.0));
    }

    #[test]
    fn split_matches_flat_recomputation() {
        let samples: Vec<Sample> = (0..50)
            .map(|i| sample(&format!("s{i:02}"), 3.0, if i % 3 == 0 { 1.2 } else { 0.4 }))
            .collect();
        let preds: Vec<Prediction> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| pred(&s.id, 3.0 + (i % 5) as f64 * 0.2))
            .collect();
        let split = disagreement_split(&preds, &samples, 1.0).unwrap();
        let high: Vec<f64> = samples
            .iter()
            .zip(&preds)
            .filter(|(s, _)| s.gold_std >= 1.0)
            .map(|(s, p)| (p.score - s.gold_mean).abs())
            .collect();
        assert_eq!(split.high_n, high.len());
        let oracle = high.iter().sum::<f64>() / high.len() as f64;
        assert!((split.high_mae.unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn histograms_conserve_mass_and_cluster_integers() {
        let samples: Vec<Sample> = (0..40)
            .map(|i| sample(&format!("s{i:02}"), 1.0 + (i % 17) as f64 * 0.25, 0.0))
            .collect();
        let preds: Vec<Prediction> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| pred(&s.id, (i % 5 + 1) as f64))
            .collect();
        let csv = distributions_csv(&preds, &samples).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 16);
        let mut gold_total = 0usize;
        let mut pred_total = 0usize;
        for row in &rows {
            let cols: Vec<&str> = row.split(',').collect();
            let lo: f64 = cols[0].parse().unwrap();
            let g: usize = cols[2].parse().unwrap();
            let p: usize = cols[3].parse().unwrap();
            gold_total += g;
            pred_total += p;
            // integer-only predictions put mass only in bins whose lo is an
            // integer (or the final bin, which holds 5.0)
            let holds_integer = lo.fract() == 0.0 || (lo - 4.75).abs() < 1e-12;
            if !holds_integer {
                assert_eq!(p, 0, "unexpected prediction mass in bin at {lo}");
            }
        }
        assert_eq!(gold_total, 40);
        assert_eq!(pred_total, 40);
    }

    #[test]
    fn worst_cases_order_clamp_and_ties() {
        let samples = vec![
            sample("a", 1.0, 0.0),
            sample("b", 3.0, 0.0),
            sample("c", 3.0, 0.0),
        ];
        let preds = vec![pred("a", 5.0), pred("b", 4.0), pred("c", 2.0)];
        let top = worst_cases(&preds, &samples, 1).unwrap();
        assert_eq!(top[0].sample.id, "a");
        assert_eq!(top[0].abs_err, 4.0);
        // tie on abs_err 1.0 between b and c: smaller id first
        let all = worst_cases(&preds, &samples, 10).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[1].sample.id, "b");
        assert_eq!(all[2].sample.id, "c");
    }

    #[test]
    fn report_perfect_predictions() {
        let samples = vec![
            sample("a", 1.5, 0.5),
            sample("b", 3.0, 1.0),
            sample("c", 4.2, 0.2),
        ];
        let preds: Vec<Prediction> = samples.iter().map(|s| pred(&s.id, s.gold_mean)).collect();
        let report = build_report(&preds, &samples, "perfect", 0).unwrap();
        assert!((report.spearman - 1.0).abs() < 1e-12);
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.mae, 0.0);
        for b in &report.buckets {
            if b.n > 0 {
                assert_eq!(b.mae, Some(0.0));
            }
        }
    }

    #[test]
    fn report_permutation_invariant() {
        let samples = vec![
            sample("a", 1.5, 0.5),
            sample("b", 3.0, 1.0),
            sample("c", 4.2, 0.2),
            sample("d", 2.0, 0.0),
        ];
        let mut preds = vec![pred("a", 2.0), pred("b", 3.5), pred("c", 4.0), pred("d", 2.0)];
        let r1 = build_report(&preds, &samples, "x", 0).unwrap();
        preds.reverse();
        let r2 = build_report(&preds, &samples, "x", 0).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn report_incomplete_coverage_lists_ids() {
        let samples = vec![sample("a", 2.0, 0.0), sample("b", 3.0, 0.0)];
        let preds = vec![pred("a", 2.0)];
        match build_report(&preds, &samples, "x", 0) {
            Err(AnalysisError::IncompleteCoverage(ids)) => assert_eq!(ids, vec!["b".to_string()]),
            other => panic!("unexpected: {other:?}"),
        }
    }
}
