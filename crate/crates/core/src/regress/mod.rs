//! Closed-form Ridge regression and the composite-loss gradient trainer
//! (regression + pairwise ranking + uncertainty hinge).

mod loss;
mod ridge;
mod trainer;

pub use loss::{
    composite_loss, huber_loss, ranknet_loss, sample_pairs, uncertainty_loss, Batch, Gradient,
};
pub use ridge::{normal_equation_residual, ridge_fit};
pub use trainer::{train_gd, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureVector, SchemaId};

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("label {0} outside [1, 5]")]
    LabelOutOfRange(f64),
    #[error("sigma must be >= 0, got {0}")]
    NegativeSigma(f64),
    #[error("singular normal equations; use alpha > 0")]
    Singular,
    #[error("feature width mismatch: model has {expected}, input has {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("training diverged (non-finite loss) at epoch {0}")]
    Divergence(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    Mse,
    Huber,
}

impl std::str::FromStr for RegKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(RegKind::Mse),
            "huber" => Ok(RegKind::Huber),
            other => Err(format!("unknown loss '{other}' (expected mse or huber)")),
        }
    }
}

/// Composite objective configuration. Defaults follow the best reported
/// configuration: MSE regression term, lambda_r = 0.25, lambda_u = 0.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub reg_kind: RegKind,
    /// Huber transition point.
    pub delta: f64,
    pub lambda_r: f64,
    pub lambda_u: f64,
    /// Maximum number of ranking pairs per batch.
    pub pair_cap: usize,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            reg_kind: RegKind::Mse,
            delta: 1.0,
            lambda_r: 0.25,
            lambda_u: 0.5,
            pair_cap: 256,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), RegressError> {
        if self.delta <= 0.0 {
            return Err(RegressError::BadParam(format!("delta {} must be > 0", self.delta)));
        }
        if self.lambda_r < 0.0 || self.lambda_u < 0.0 {
            return Err(RegressError::BadParam("lambdas must be >= 0".into()));
        }
        if self.pair_cap == 0 {
            return Err(RegressError::BadParam("pair_cap must be > 0".into()));
        }
        Ok(())
    }
}

/// Which space the affine score lives in: UNIT means the model was trained
/// on 0-1 normalized labels and predictions must be denormalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSpace {
    Unit,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub label_space: LabelSpace,
}

impl LinearModel {
    pub fn width(&self) -> usize {
        self.weights.len()
    }

    /// Unclipped affine score in the model's label space.
    pub fn raw_score(&self, features: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(features)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias
    }
}

/// Maps gold labels from [1, 5] to [0, 1].
pub fn normalize_labels(gold: &[f64]) -> Result<Vec<f64>, RegressError> {
    gold.iter()
        .map(|&y| {
            if !(1.0..=5.0).contains(&y) {
                Err(RegressError::LabelOutOfRange(y))
            } else {
                Ok((y - 1.0) / 4.0)
            }
        })
        .collect()
}

/// Inverse of [`normalize_labels`], clipped to the rating scale.
pub fn denormalize_label(y_unit: f64) -> f64 {
    (1.0 + 4.0 * y_unit).clamp(1.0, 5.0)
}

/// Final rating prediction: affine score, denormalized when the model is in
/// UNIT space, always clipped to [1, 5].
pub fn predict_values(model: &LinearModel, features: &[f64]) -> Result<f64, RegressError> {
    if features.len() != model.width() {
        return Err(RegressError::WidthMismatch {
            expected: model.width(),
            got: features.len(),
        });
    }
    let score = model.raw_score(features);
    Ok(match model.label_space {
        LabelSpace::Unit => denormalize_label(score),
        LabelSpace::Raw => score.clamp(1.0, 5.0),
    })
}

pub fn predict(model: &LinearModel, features: &FeatureVector) -> Result<f64, RegressError> {
    predict_values(model, &features.values)
}

/// On-disk model format: `{schema_id, weights[], bias, label_space}` plus
/// run provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_id: SchemaId,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub label_space: LabelSpace,
    /// Whether sigma margins were normalized with the labels.
    pub sigma_normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelFile {
    pub fn model(&self) -> LinearModel {
        LinearModel {
            weights: self.weights.clone(),
            bias: self.bias,
            label_space: self.label_space,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let got = normalize_labels(&[1.0, 5.0, 3.0]).unwrap();
        assert_eq!(got, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn normalize_rejects_out_of_range() {
        assert!(matches!(
            normalize_labels(&[0.5]),
            Err(RegressError::LabelOutOfRange(_))
        ));
        assert!(normalize_labels(&[5.1]).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        for x in [1.2, 2.7, 4.9] {
            let y = normalize_labels(&[x]).unwrap()[0];
            assert!((denormalize_label(y) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_midpoint_and_clip() {
        let model = LinearModel {
            weights: vec![0.0, 0.0],
            bias: 0.5,
            label_space: LabelSpace::Unit,
        };
        assert_eq!(predict_values(&model, &[1.0, 2.0]).unwrap(), 3.0);

        let big = LinearModel {
            weights: vec![100.0],
            bias: 0.0,
            label_space: LabelSpace::Unit,
        };
        assert_eq!(predict_values(&big, &[10.0]).unwrap(), 5.0);
        assert_eq!(predict_values(&big, &[-10.0]).unwrap(), 1.0);
    }

    #[test]
    fn predict_matches_dot_product_by_hand() {
        let model = LinearModel {
            weights: vec![0.1, -0.2, 0.05],
            bias: 0.3,
            label_space: LabelSpace::Unit,
        };
        let x = [1.0, 0.5, 2.0];
        // 0.1 - 0.1 + 0.1 + 0.3 = 0.4 -> 1 + 4*0.4 = 2.6
        assert!((predict_values(&model, &x).unwrap() - 2.6).abs() < 1e-12);
    }

    #[test]
    fn predict_width_mismatch() {
        let model = LinearModel {
            weights: vec![1.0],
            bias: 0.0,
            label_space: LabelSpace::Raw,
        };
        assert!(matches!(
            predict_values(&model, &[1.0, 2.0]),
            Err(RegressError::WidthMismatch { expected: 1, got: 2 })
        ));
    }
}
