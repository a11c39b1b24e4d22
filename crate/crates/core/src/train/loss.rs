use crate::error::{dim_err, Result};
use crate::network::argmax_rows;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    /// Mean over the batch.
    pub loss: f64,
    /// Gradient of the mean loss with respect to the logits.
    pub grad: Tensor<T>,
    pub correct: usize,
}

/// Softmax cross-entropy over `(N, K, 1, 1)` logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<LossOutput<T>> {
    let n = logits.batch();
    let k = logits.channels() * logits.plane();
    if labels.len() != n {
        return dim_err(format!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return dim_err(format!("label {bad} out of range for {k} classes"));
    }
    let mut grad = vec![T::zero(); n * k];
    let mut total = 0.0;
    for ((row, g), &label) in logits.data().chunks(k).zip(grad.chunks_mut(k)).zip(labels) {
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() + max - row[label].to_f64();
        for (j, (gj, e)) in g.iter_mut().zip(&exps).enumerate() {
            let p = e / sum - if j == label { 1.0 } else { 0.0 };
            *gj = T::from_f64(p / n as f64);
        }
    }
    let correct = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(LossOutput {
        loss: total / n as f64,
        grad: Tensor::new(logits.shape(), grad)?,
        correct,
    })
}
