//! Momentum SGD with coupled ℓ2/ℓ1 penalties, gradient masking, and the
//! milestone learning-rate schedule.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Param;
use crate::scalar::Scalar;
use crate::sparsify::MaskSet;
use crate::tensor::Tensor;

/// Piecewise-constant schedule: `base_lr · drop_factor^(#milestones ≤ epoch)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub drop_factor: f64,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            milestones: Vec::new(),
            drop_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("base_lr", "must be positive"));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor <= 1.0) {
            return Err(Error::invalid("drop_factor", "must lie in (0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("milestones", "must be ascending"));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * libm::pow(self.drop_factor, drops as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub l1_penalty: f64,
    buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed momentum buffers shaped like `params`.
    pub fn new(params: &[Param<T>], momentum: f64, weight_decay: f64, l1_penalty: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if weight_decay < 0.0 || l1_penalty < 0.0 {
            return Err(Error::invalid("weight_decay", "penalties must be non-negative"));
        }
        Ok(Self {
            momentum,
            weight_decay,
            l1_penalty,
            buffers: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        })
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::ZERO {
        T::ONE
    } else if v < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}

/// One update: `g' = (g + λ2·w + λ1·sign(w)) ⊙ mask`, `v ← μ·v + g'`,
/// `w ← w − lr·v`; masked entries are then pinned to exactly zero.
pub fn masked_sgd_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    masks: &MaskSet,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid("lr", "must be non-negative"));
    }
    if grads.len() != params.len() || state.buffers.len() != params.len() {
        return Err(Error::shape("masked_sgd_step", &[params.len()], &[grads.len()]));
    }
    let (mu, l2, l1, lr) = (
        T::from_f64(state.momentum),
        T::from_f64(state.weight_decay),
        T::from_f64(state.l1_penalty),
        T::from_f64(lr),
    );
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.value.shape() != g.shape() {
            return Err(Error::shape("masked_sgd_step", p.value.shape(), g.shape()));
        }
        let mask = masks.get(i);
        if let Some(m) = mask {
            if m.len() != p.value.numel() {
                return Err(Error::shape("mask", &[p.value.numel()], &[m.len()]));
            }
        }
        let buf = state.buffers[i].data_mut();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            let keep = mask.is_none_or(|m| m.is_kept(j));
            let g = if keep { g.data()[j] + l2 * w[j] + l1 * sign(w[j]) } else { T::ZERO };
            buf[j] = mu * buf[j] + g;
            w[j] = if keep { w[j] - lr * buf[j] } else { T::ZERO };
        }
    }
    Ok(())
}
