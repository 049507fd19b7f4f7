//! Losses returning `(value, gradient w.r.t. the prediction)`.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Probabilities below this are clamped inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Weighted mean cross-entropy of row-wise class probabilities.
/// `weights = None` means every row has weight 1.
pub fn cross_entropy(
    probs: &Matrix,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Matrix)> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != labels.len() {
            return Err(Error::Shape("one weight per row required".into()));
        }
    }
    let classes = probs.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Label(format!("label {bad} with only {classes} classes")));
    }
    let total: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => labels.len() as f64,
    };
    let mut grad = Matrix::zeros(probs.rows(), classes);
    if total <= 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let p = probs.get(i, y).max(LOG_FLOOR);
        loss -= w * p.ln();
        grad.set(i, y, -w / (total * p));
    }
    Ok((loss / total, grad))
}

/// Mean squared error over all entries.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.data().len().max(1) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_correct_prediction_has_zero_loss() {
        let p = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let (l, _) = cross_entropy(&p, &[0, 2], None).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_prediction_is_ln_c() {
        let p = Matrix::filled(4, 10, 0.1);
        let (l, _) = cross_entropy(&p, &[0, 3, 9, 5], None).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label() {
        let p = Matrix::filled(1, 2, 0.5);
        assert!(matches!(cross_entropy(&p, &[2], None), Err(Error::Label(_))));
    }

    #[test]
    fn entropy_of_uniform() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }
}
