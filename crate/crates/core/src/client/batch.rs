//! Batch prediction runner: renders one prompt per sample, completes them
//! with bounded parallelism, and parses ratings into `Prediction`s ordered
//! by input index.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::{cached_complete, complete, ChatProvider, ClientError, ProviderConfig};
use crate::model::{Prediction, Sample};
use crate::prompting::{build_p1, build_p2, parse_rating, ParseMode, PromptBundle, Strategy};

/// Midpoint fallback when a response yields no parsable rating; keeps the
/// metric denominator equal to the sample count.
pub const FALLBACK_SCORE: f64 = 3.0;

#[derive(Debug, Clone, Serialize)]
pub struct ParseFailure {
    pub sample_id: String,
    pub raw: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunLog {
    pub system_id: String,
    pub strategy: Strategy,
    pub parse_mode: ParseMode,
    pub n: usize,
    pub provider_calls: usize,
    pub cache_hits: usize,
    pub parse_failures: Vec<ParseFailure>,
    /// Sample ids whose requests failed transport (below the abort
    /// threshold); they carry the fallback score.
    pub transport_failures: Vec<String>,
    pub temperature_sent: Option<f64>,
}

enum SlotOutcome {
    Parsed { score: f64, raw: String },
    ParseFailed { raw: String },
    TransportFailed { error: String },
}

fn render_bundle(
    sample: &Sample,
    strategy: Strategy,
    shots: Option<&[Sample]>,
) -> Result<PromptBundle, ClientError> {
    match strategy {
        Strategy::P1 => {
            let shots = shots.ok_or_else(|| {
                ClientError::Script("P1 requires few-shot examples resolved before the batch".into())
            })?;
            build_p1(sample, shots)
                .map_err(|e| ClientError::Script(format!("few-shot rendering: {e}")))
        }
        Strategy::P2 => Ok(build_p2(sample)),
    }
}

/// Runs a whole batch. Output order equals input order at every
/// parallelism level; aborts when more than 20% of requests fail
/// transport, leaving completed responses in the cache.
#[allow(clippy::too_many_arguments)]
pub fn run_batch(
    samples: &[Sample],
    strategy: Strategy,
    shots: Option<&[Sample]>,
    cfg: &ProviderConfig,
    provider: &dyn ChatProvider,
    cache_dir: Option<&Path>,
    parse_mode: ParseMode,
    system_id: &str,
) -> Result<(Vec<Prediction>, RunLog), ClientError> {
    let n = samples.len();
    let next = AtomicUsize::new(0);
    let transport_failures = AtomicUsize::new(0);
    let cache_hits = AtomicUsize::new(0);
    let provider_calls = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<SlotOutcome>>> = (0..n).map(|_| Mutex::new(None)).collect();
    // abort once failures strictly exceed 20% of the batch
    let abort_after = n / 5;
    let workers = cfg.parallelism.max(1).min(n.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                if transport_failures.load(Ordering::SeqCst) > abort_after {
                    break;
                }
                let outcome = match render_bundle(&samples[i], strategy, shots) {
                    Ok(bundle) => {
                        let result = match cache_dir {
                            Some(dir) => cached_complete(&bundle, cfg, provider, dir),
                            None => complete(&bundle, cfg, provider).map(|t| (t, false)),
                        };
                        match result {
                            Ok((text, hit)) => {
                                if hit {
                                    cache_hits.fetch_add(1, Ordering::SeqCst);
                                } else {
                                    provider_calls.fetch_add(1, Ordering::SeqCst);
                                }
                                match parse_rating(&text, parse_mode) {
                                    Ok(rating) => SlotOutcome::Parsed {
                                        score: rating.value as f64,
                                        raw: text,
                                    },
                                    Err(_) => SlotOutcome::ParseFailed { raw: text },
                                }
                            }
                            Err(e) => {
                                transport_failures.fetch_add(1, Ordering::SeqCst);
                                SlotOutcome::TransportFailed {
                                    error: e.to_string(),
                                }
                            }
                        }
                    }
                    Err(e) => SlotOutcome::TransportFailed {
                        error: e.to_string(),
                    },
                };
                *slots[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    let failures = transport_failures.load(Ordering::SeqCst);
    if failures > abort_after {
        return Err(ClientError::BatchAborted { failures, total: n });
    }

    let mut predictions = Vec::with_capacity(n);
    let mut parse_failures = Vec::new();
    let mut transport_failed_ids = Vec::new();
    for (sample, slot) in samples.iter().zip(&slots) {
        let outcome = slot
            .lock()
            .unwrap()
            .take()
            .expect("every slot filled when not aborted");
        let (score, raw) = match outcome {
            SlotOutcome::Parsed { score, raw } => (score, Some(raw)),
            SlotOutcome::ParseFailed { raw } => {
                parse_failures.push(ParseFailure {
                    sample_id: sample.id.clone(),
                    raw: raw.clone(),
                });
                (FALLBACK_SCORE, Some(raw))
            }
            SlotOutcome::TransportFailed { error } => {
                transport_failed_ids.push(sample.id.clone());
                (FALLBACK_SCORE, Some(format!("<transport error: {error}>")))
            }
        };
        predictions.push(Prediction {
            sample_id: sample.id.clone(),
            score,
            system_id: system_id.to_string(),
            raw_response: raw,
        });
    }

    let log = RunLog {
        system_id: system_id.to_string(),
        strategy,
        parse_mode,
        n,
        provider_calls: provider_calls.load(Ordering::SeqCst),
        cache_hits: cache_hits.load(Ordering::SeqCst),
        parse_failures,
        transport_failures: transport_failed_ids,
        temperature_sent: cfg.temperature_sent(),
    };
    Ok((predictions, log))
}
