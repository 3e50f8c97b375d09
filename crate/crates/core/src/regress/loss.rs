//! The composite training objective: regression term (MSE or Huber),
//! RankNet pairwise term over sampled pairs, and the uncertainty hinge with
//! the annotator sigma as margin.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LinearModel, LossConfig, RegKind, RegressError};

/// Numerically stable log(1 + e^x).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Huber loss: quadratic inside |r| <= delta, linear outside.
pub fn huber_loss(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_grad(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        residual
    } else {
        delta * residual.signum()
    }
}

/// RankNet pairwise loss -log sigma(score_hi - score_lo) for a pair whose
/// gold ratings satisfy gold_hi > gold_lo. Stabilized via the softplus
/// form, so extreme margins neither overflow nor underflow.
pub fn ranknet_loss(score_hi: f64, score_lo: f64) -> f64 {
    softplus(-(score_hi - score_lo))
}

/// Hinge on the absolute error with the per-sample annotator sigma as
/// margin: zero inside the human disagreement band, linear outside.
pub fn uncertainty_loss(pred: f64, gold: f64, sigma: f64) -> Result<f64, RegressError> {
    if sigma < 0.0 {
        return Err(RegressError::NegativeSigma(sigma));
    }
    Ok(((pred - gold).abs() - sigma).max(0.0))
}

/// All (i, j) index pairs with gold[i] strictly greater than gold[j], in
/// canonical (i, j) order; a seeded uniform subset when more than `cap`
/// exist. All-tied batches yield an empty list.
pub fn sample_pairs(batch_golds: &[f64], cap: usize, seed: u64) -> Vec<(usize, usize)> {
    let n = batch_golds.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if batch_golds[i] > batch_golds[j] {
                pairs.push((i, j));
            }
        }
    }
    if pairs.len() <= cap {
        return pairs;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, pairs.len(), cap).into_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|k| pairs[k]).collect()
}

/// A training batch in whatever label space the caller uses; golds and
/// sigmas must share that space.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub golds: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.golds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.golds.is_empty()
    }

    fn check(&self, width: usize) -> Result<(), RegressError> {
        if self.is_empty() {
            return Err(RegressError::EmptyBatch);
        }
        if self.features.len() != self.golds.len() || self.sigmas.len() != self.golds.len() {
            return Err(RegressError::BadParam(
                "features/golds/sigmas lengths differ".into(),
            ));
        }
        for row in &self.features {
            if row.len() != width {
                return Err(RegressError::WidthMismatch {
                    expected: width,
                    got: row.len(),
                });
            }
        }
        if let Some(&s) = self.sigmas.iter().find(|s| **s < 0.0) {
            return Err(RegressError::NegativeSigma(s));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Loss and analytic gradient of
/// L = mean reg + lambda_r * mean rank + lambda_u * mean unc
/// over the batch, in the batch's label space. Subgradient 0 at the Huber
/// and hinge kinks.
pub fn composite_loss(
    model: &LinearModel,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<(f64, Gradient), RegressError> {
    cfg.validate()?;
    let d = model.width();
    batch.check(d)?;
    let n = batch.len();
    let preds: Vec<f64> = batch.features.iter().map(|x| model.raw_score(x)).collect();

    // per-sample dL/ds coefficients, accumulated across terms
    let mut coeff = vec![0.0; n];
    let mut loss = 0.0;

    for i in 0..n {
        let r = preds[i] - batch.golds[i];
        match cfg.reg_kind {
            RegKind::Mse => {
                loss += r * r / n as f64;
                coeff[i] += 2.0 * r / n as f64;
            }
            RegKind::Huber => {
                loss += huber_loss(r, cfg.delta) / n as f64;
                coeff[i] += huber_grad(r, cfg.delta) / n as f64;
            }
        }
        if cfg.lambda_u > 0.0 {
            let u = uncertainty_loss(preds[i], batch.golds[i], batch.sigmas[i])?;
            loss += cfg.lambda_u * u / n as f64;
            if u > 0.0 {
                coeff[i] += cfg.lambda_u * r.signum() / n as f64;
            }
        }
    }

    if cfg.lambda_r > 0.0 {
        let pairs = sample_pairs(&batch.golds, cfg.pair_cap, cfg.seed);
        if !pairs.is_empty() {
            let p = pairs.len() as f64;
            for &(i, j) in &pairs {
                let margin = preds[i] - preds[j];
                loss += cfg.lambda_r * softplus(-margin) / p;
                let dm = logistic(margin) - 1.0;
                coeff[i] += cfg.lambda_r * dm / p;
                coeff[j] -= cfg.lambda_r * dm / p;
            }
        }
    }

    let mut grad_w = vec![0.0; d];
    let mut grad_b = 0.0;
    for (c, x) in coeff.iter().zip(&batch.features) {
        for (g, xi) in grad_w.iter_mut().zip(x) {
            *g += c * xi;
        }
        grad_b += c;
    }
    Ok((
        loss,
        Gradient {
            weights: grad_w,
            bias: grad_b,
        },
    ))
}
