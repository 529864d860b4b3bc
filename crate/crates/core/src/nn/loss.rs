//! Cross-entropy loss without reduction across examples.

use super::{NnError, Result};
use crate::tensor::Tensor;

/// Per-example cross-entropy `-log softmax(logits)[label]`.
///
/// `logits` has shape `[batch, classes]`; the result has shape `[batch]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(NnError::Shape {
            layer: "cross_entropy".into(),
            expected: format!("[{}, classes]", labels.len()),
            actual: logits.shape().to_vec(),
        });
    }
    let losses = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| example_loss(logits.item(i), label))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::vector(losses))
}

pub(crate) fn example_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(NnError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Loss and its gradient w.r.t. the logits (`softmax - onehot`).
pub(crate) fn example_loss_grad(logits: &[f64], label: usize, dlogits: &mut [f64]) -> Result<f64> {
    let loss = example_loss(logits, label)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &z) in dlogits.iter_mut().zip(logits) {
        *d = (z - max).exp();
        total += *d;
    }
    for d in dlogits.iter_mut() {
        *d /= total;
    }
    dlogits[label] -= 1.0;
    Ok(loss)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros(vec![3, 10]);
        let loss = cross_entropy(&logits, &[0, 4, 9]).unwrap();
        for &l in loss.data() {
            assert!((l - 10f64.ln()).abs() < 1e-15);
        }
        assert!((loss.data()[0] - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn extreme_logits_are_stable() {
        let logits = Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap();
        let loss = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.data()[0].is_finite());
        assert!(loss.data()[0].abs() < 1e-300);
    }

    #[test]
    fn closed_form_two_class() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let loss = cross_entropy(&logits, &[1]).unwrap();
        assert!((loss.data()[0] - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((loss.data()[0] - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(NnError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn uniform_gradient_is_softmax_minus_onehot() {
        let k = 4;
        let mut d = vec![0.0; k];
        example_loss_grad(&vec![0.0; k], 2, &mut d).unwrap();
        assert_eq!(d, vec![0.25, 0.25, -0.75, 0.25]);
    }
}
