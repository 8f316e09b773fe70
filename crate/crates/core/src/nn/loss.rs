use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    /// Mean negative log-likelihood over the selected positions.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl MaskedLoss {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and argmax hits over rows where `loss_mask` is set.
pub fn masked_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], loss_mask: &[bool]) -> Result<MaskedLoss> {
    let rows = logits.rows();
    if labels.len() != rows || loss_mask.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} logit rows, {} labels, {} mask entries",
            labels.len(),
            loss_mask.len()
        )));
    }
    let mut total = 0.0;
    let mut correct = 0;
    let mut count = 0;
    for r in 0..rows {
        if !loss_mask[r] {
            continue;
        }
        let row = logits.row(r);
        let label = labels[r];
        if label >= row.len() {
            return Err(Error::Shape(format!("label {label} outside {} classes", row.len())));
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        total += log_z - row[label].as_f64();
        correct += usize::from(argmax(row) == label);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Invalid("loss mask selects no position".into()));
    }
    Ok(MaskedLoss {
        loss: total / count as f64,
        correct,
        count,
    })
}
