use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of `[n, C]` logits, stabilized by max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [_, classes] = logits.dims2()?;
    let mut out = logits.clone();
    if classes == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<[usize; 2]> {
    let [n, classes] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for a batch of {n}", labels.len())));
    }
    if n == 0 {
        return Err(Error::contract("cross-entropy over an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
    }
    Ok([n, classes])
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let [n, classes] = check_labels(logits, labels)?;
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[label];
    }
    Ok(total / n as f64)
}

/// `(softmax(logits) - onehot(labels)) / n`.
pub fn softmax_ce_backward(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [n, classes] = check_labels(logits, labels)?;
    let mut grad = softmax(logits)?;
    for (row, &label) in grad.data_mut().chunks_exact_mut(classes).zip(labels) {
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok(grad)
}
