use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise `log softmax(row · inv_temperature)` with max subtraction.
pub fn log_softmax_rows<T: Scalar>(data: &[T], classes: usize, inv_temperature: T) -> Vec<T> {
    let mut out = vec![T::ZERO; data.len()];
    for (row, dst) in data.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().fold(row[0], |m, &v| m.max(v)) * inv_temperature;
        let lse = row.iter().map(|&v| (v * inv_temperature - max).exp()).sum::<T>().ln() + max;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v * inv_temperature - lse;
        }
    }
    out
}

pub(crate) fn batch_classes<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    match *logits.shape() {
        [b, c] if b > 0 && c > 0 => Ok((b, c)),
        _ => Err(Error::shape("logits", &[0, 0], logits.shape())),
    }
}

pub(crate) fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape("labels", &[batch], &[labels.len()]));
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`, with its gradient
/// with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (batch, classes) = batch_classes(logits)?;
    check_labels(labels, batch, classes)?;
    let logp = log_softmax_rows(logits.data(), classes, T::ONE);
    let inv_b = T::ONE / T::from_usize(batch);
    let mut total = T::ZERO;
    let mut grad = vec![T::ZERO; logp.len()];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logp[i * classes..(i + 1) * classes];
        total -= row[label];
        for (g, &lp) in grad[i * classes..(i + 1) * classes].iter_mut().zip(row) {
            *g = lp.exp() * inv_b;
        }
        grad[i * classes + label] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    cross_entropy_with_grad(logits, labels).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::full([3, 10], 0.7);
        let v = cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        assert!((v - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn dominant_true_logit_gives_zero() {
        let logits = Tensor::<f32>::from_f64([1, 3], &[1e6, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&logits, &[0]).unwrap().abs() < 1e-6);
    }

    #[test]
    fn two_class_hand_value() {
        let logits = Tensor::<f64>::from_f64([1, 2], &[1.0, 0.0]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let v = cross_entropy(&logits, &[0]).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::<f32>::zeros([1, 3]);
        assert_eq!(
            cross_entropy(&logits, &[3]).unwrap_err(),
            Error::LabelOutOfRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn log_softmax_survives_huge_logits() {
        let lp = log_softmax_rows(&[1000.0f32, 0.0], 2, 1.0);
        assert!(lp.iter().all(|v| v.is_finite()));
        assert_eq!(lp[0], 0.0);
    }
}
