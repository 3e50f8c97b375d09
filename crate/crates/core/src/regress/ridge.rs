//! Closed-form Ridge solve on centered data with an unpenalized bias.

use nalgebra::{DMatrix, DVector};

use super::{LabelSpace, LinearModel, RegressError};

/// Solves (Xc'Xc + alpha I) w = Xc' yc on column-centered data; the bias
/// restores the means. Errors when the system is singular (possible at
/// alpha = 0).
pub fn ridge_fit(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<LinearModel, RegressError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(RegressError::EmptyBatch);
    }
    if alpha < 0.0 {
        return Err(RegressError::BadParam(format!("alpha {alpha} must be >= 0")));
    }
    let n = x.len();
    let d = x[0].len();
    if x.iter().any(|row| row.len() != d) {
        return Err(RegressError::WidthMismatch {
            expected: d,
            got: x.iter().map(Vec::len).find(|&l| l != d).unwrap_or(d),
        });
    }

    let col_means: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;

    // gram = Xc'Xc + alpha I, rhs = Xc'yc
    let mut gram = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (row, &yi) in x.iter().zip(y) {
        let yc = yi - y_mean;
        for j in 0..d {
            let xj = row[j] - col_means[j];
            rhs[j] += xj * yc;
            for k in j..d {
                gram[(j, k)] += xj * (row[k] - col_means[k]);
            }
        }
    }
    for j in 0..d {
        gram[(j, j)] += alpha;
        for k in j + 1..d {
            gram[(k, j)] = gram[(j, k)];
        }
    }

    let chol = gram.clone().cholesky().ok_or(RegressError::Singular)?;
    // rounding can leave a tiny positive pivot on an exactly singular gram
    let l = chol.l();
    let pivots: Vec<f64> = (0..d).map(|j| l[(j, j)]).collect();
    let max_pivot = pivots.iter().cloned().fold(0.0, f64::max);
    if pivots.iter().any(|&p| p <= 1e-6 * max_pivot) {
        return Err(RegressError::Singular);
    }
    let w: DVector<f64> = chol.solve(&rhs);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(RegressError::Singular);
    }
    let bias = y_mean
        - w.iter()
            .zip(&col_means)
            .map(|(wi, mi)| wi * mi)
            .sum::<f64>();
    Ok(LinearModel {
        weights: w.iter().copied().collect(),
        bias,
        label_space: LabelSpace::Raw,
    })
}

/// Relative residual of the centered normal equations for a fitted model;
/// used as the solver's correctness oracle.
pub fn normal_equation_residual(x: &[Vec<f64>], y: &[f64], alpha: f64, model: &LinearModel) -> f64 {
    let n = x.len();
    let d = x[0].len();
    let col_means: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut gram_w = vec![0.0; d];
    let mut rhs = vec![0.0; d];
    for (row, &yi) in x.iter().zip(y) {
        let yc = yi - y_mean;
        let centered: Vec<f64> = row.iter().zip(&col_means).map(|(v, m)| v - m).collect();
        let proj: f64 = centered.iter().zip(&model.weights).map(|(a, b)| a * b).sum();
        for j in 0..d {
            gram_w[j] += centered[j] * proj;
            rhs[j] += centered[j] * yc;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..d {
        let lhs = gram_w[j] + alpha * model.weights[j];
        num += (lhs - rhs[j]).powi(2);
        den += rhs[j].powi(2);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
