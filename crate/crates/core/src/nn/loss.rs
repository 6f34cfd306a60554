//! Forecasting losses and their gradients w.r.t. the head pre-activations.

use super::matrix::Matrix;

/// Floor applied to probabilities before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean of squared differences over all elements.
pub fn loss_mse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "mse length mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Gradient of [`loss_mse`] over a whole batch.
pub fn mse_grad(pred: &Matrix, target: &Matrix) -> Matrix {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let scale = 2.0 / pred.len() as f64;
    Matrix::from_vec(
        pred.rows,
        pred.cols,
        pred.data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| scale * (p - t))
            .collect(),
    )
}

pub fn loss_cross_entropy(probabilities: &[f64], target_id: usize) -> f64 {
    -probabilities[target_id].max(PROB_FLOOR).ln()
}

/// Mean cross-entropy over the rows of a probability matrix.
pub fn batch_cross_entropy(probabilities: &Matrix, targets: &[usize]) -> f64 {
    assert_eq!(probabilities.rows, targets.len(), "target count mismatch");
    if targets.is_empty() {
        return 0.0;
    }
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| loss_cross_entropy(probabilities.row(r), t))
        .sum::<f64>()
        / targets.len() as f64
}

/// Gradient of [`batch_cross_entropy`] w.r.t. the softmax logits.
pub fn cross_entropy_grad(probabilities: &Matrix, targets: &[usize]) -> Matrix {
    assert_eq!(probabilities.rows, targets.len(), "target count mismatch");
    let scale = 1.0 / targets.len() as f64;
    let mut g = probabilities.clone();
    for (r, &t) in targets.iter().enumerate() {
        let row = g.row_mut(r);
        row[t] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    g
}
