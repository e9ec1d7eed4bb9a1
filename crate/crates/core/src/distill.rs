//! Response-based knowledge distillation.
//!
//! The student minimizes `(1−α)·CE(student, labels) + α·τ²·KL(p_t ‖ p_s)`
//! where `p_t` and `p_s` are the temperature-softened teacher and student
//! distributions and the KL term is averaged over the batch.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::loss::{batch_classes, check_labels, cross_entropy_with_grad, log_softmax_rows};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_TEMPERATURE: f64 = 10.0;

/// Distillation weight and temperature; fixed for a whole sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", "must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature", "must be positive"));
        }
        Ok(())
    }
}

/// Batch-mean `KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn kl_divergence<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>, tau: T) -> Result<T> {
    let (batch, classes) = batch_classes(student)?;
    if teacher.shape() != student.shape() {
        return Err(Error::shape("kl_divergence", student.shape(), teacher.shape()));
    }
    let inv_tau = T::ONE / tau;
    let ls = log_softmax_rows(student.data(), classes, inv_tau);
    let lt = log_softmax_rows(teacher.data(), classes, inv_tau);
    let total: T = lt.iter().zip(&ls).map(|(&t, &s)| t.exp() * (t - s)).sum();
    Ok(total / T::from_usize(batch))
}

/// Distillation loss and its gradient with respect to the student logits.
pub fn kd_loss_with_grad<T: Scalar>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    labels: &[usize],
    alpha: T,
    tau: T,
) -> Result<(T, Vec<T>)> {
    if !(tau > T::ZERO) {
        return Err(Error::invalid("temperature", "must be positive"));
    }
    if !(alpha >= T::ZERO && alpha <= T::ONE) {
        return Err(Error::invalid("alpha", "must lie in [0, 1]"));
    }
    let (batch, classes) = batch_classes(student)?;
    if teacher.shape() != student.shape() {
        return Err(Error::shape("kd_loss", student.shape(), teacher.shape()));
    }
    check_labels(labels, batch, classes)?;

    let (ce, ce_grad) = cross_entropy_with_grad(student, labels)?;
    let inv_tau = T::ONE / tau;
    let ls = log_softmax_rows(student.data(), classes, inv_tau);
    let lt = log_softmax_rows(teacher.data(), classes, inv_tau);
    let inv_b = T::ONE / T::from_usize(batch);

    let mut kl = T::ZERO;
    let mut grad = vec![T::ZERO; ls.len()];
    let hard = T::ONE - alpha;
    // d/ds [α·τ²·KL] = α·τ·(p_s − p_t) / batch
    let soft = alpha * tau * inv_b;
    for i in 0..ls.len() {
        let pt = lt[i].exp();
        kl += pt * (lt[i] - ls[i]);
        grad[i] = hard * ce_grad[i] + soft * (ls[i].exp() - pt);
    }
    let loss = hard * ce + alpha * tau * tau * kl * inv_b;
    Ok((loss, grad))
}

pub fn kd_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>, labels: &[usize], alpha: T, tau: T) -> Result<T> {
    kd_loss_with_grad(student, teacher, labels, alpha, tau).map(|(v, _)| v)
}

/// Teacher logits for `batch` in eval mode; nothing is recorded for gradients.
pub fn teacher_predict<T: Scalar>(teacher: &Model<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    teacher.predict(batch)
}
