//! Full-batch gradient descent on the composite objective with
//! Spearman-patience early stopping against a validation split.

use serde::Serialize;

use super::{composite_loss, normalize_labels, Batch, LabelSpace, LinearModel, LossConfig, RegressError};
use crate::metrics::spearman;

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_spearman: f64,
    pub stopped_early: bool,
    pub loss_trace: Vec<f64>,
}

fn val_spearman(model: &LinearModel, val: &Batch) -> f64 {
    let preds: Vec<f64> = val.features.iter().map(|x| model.raw_score(x)).collect();
    // a constant-prediction epoch scores worst instead of erroring
    spearman(&preds, &val.golds).unwrap_or(f64::NEG_INFINITY)
}

/// Trains a linear model in normalized label space. Batches carry raw
/// golds/sigmas in [1, 5]; both are scaled by the same /4 factor so the
/// hinge margin lives in the training space. Stops when validation
/// Spearman has not improved for `patience` epochs and returns the
/// best-validation model.
pub fn train_gd(
    train: &Batch,
    val: &Batch,
    cfg: &LossConfig,
    lr: f64,
    max_epochs: usize,
    patience: usize,
) -> Result<(LinearModel, TrainReport), RegressError> {
    cfg.validate()?;
    if lr <= 0.0 {
        return Err(RegressError::BadParam(format!("lr {lr} must be > 0")));
    }
    if max_epochs == 0 {
        return Err(RegressError::BadParam("max_epochs must be >= 1".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(RegressError::EmptyBatch);
    }
    let d = train.features[0].len();
    let norm = |b: &Batch| -> Result<Batch, RegressError> {
        Ok(Batch {
            features: b.features.clone(),
            golds: normalize_labels(&b.golds)?,
            sigmas: b.sigmas.iter().map(|s| s / 4.0).collect(),
        })
    };
    let train_n = norm(train)?;
    let val_n = norm(val)?;

    let init_bias = train_n.golds.iter().sum::<f64>() / train_n.len() as f64;
    let mut model = LinearModel {
        weights: vec![0.0; d],
        bias: init_bias,
        label_space: LabelSpace::Unit,
    };

    let mut loss_trace = Vec::new();
    let mut best = model.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 1..=max_epochs {
        epochs_run = epoch;
        let (loss, grad) = composite_loss(&model, &train_n, cfg)?;
        if !loss.is_finite() {
            return Err(RegressError::Divergence(epoch));
        }
        loss_trace.push(loss);
        for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        model.bias -= lr * grad.bias;

        let score = val_spearman(&model, &val_n);
        if score > best_score {
            best_score = score;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok((
        best,
        TrainReport {
            epochs_run,
            best_epoch,
            best_val_spearman: best_score,
            stopped_early,
            loss_trace,
        },
    ))
}
