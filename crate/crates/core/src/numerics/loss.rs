use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &DenseTensor, labels: &[usize]) -> Result<(f32, DenseTensor)> {
    let batch = logits.rows();
    let classes = logits.row_len();
    if labels.len() != batch {
        return Err(Error::dim("labels", &[batch], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = vec![0.0f32; batch * classes];
    let mut total = 0.0f64;
    for (n, (row, &y)) in logits.data().chunks(classes).zip(labels).enumerate() {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
        let log_sum = sum.ln();
        total += log_sum - f64::from(row[y] - max);
        let g = &mut grad[n * classes..(n + 1) * classes];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = ((f64::from(v - max).exp() / sum) / batch as f64) as f32;
        }
        g[y] -= 1.0 / batch as f32;
    }
    let loss = (total / batch as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    Ok((loss, DenseTensor::new(logits.shape().to_vec(), grad)?))
}
