//! Mini-batch training and top-1 evaluation.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{augment, AugmentSpec, Dataset};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::optim::{masked_sgd_step, LrSchedule, OptimizerState};
use crate::scalar::Scalar;
use crate::sparsify::{MaskSet, Snapshot};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub l1_penalty: f64,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr: LrSchedule::constant(0.1),
            momentum: 0.9,
            weight_decay: 0.0,
            l1_penalty: 0.0,
            augment: AugmentSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        self.lr.validate()?;
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a, T = f32> {
    CrossEntropy,
    /// Distill from a frozen teacher that sees the same augmented batch.
    Distill {
        teacher: &'a Model<T>,
        config: DistillConfig,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T = f32> {
    pub steps: usize,
    /// Mean loss over the final epoch.
    pub last_epoch_loss: f64,
    /// Parameters captured when the step counter hit the requested iteration.
    pub snapshot: Option<Snapshot<T>>,
}

/// Runs `cfg.epochs` epochs of masked SGD. A snapshot is taken before step
/// `snapshot_at` (0 = the untouched initialisation).
pub fn train<T: Scalar, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    model: &mut Model<T>,
    masks: &MaskSet,
    data: &Dataset,
    cfg: &TrainConfig,
    objective: Objective<'_, T>,
    shuffle_rng: &mut R1,
    augment_rng: &mut R2,
    snapshot_at: Option<usize>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Objective::Distill { config, .. } = objective {
        config.validate()?;
    }
    masks.validate_for(model)?;
    masks.apply_to(model.params_mut());
    let mut state = OptimizerState::new(model.params(), cfg.momentum, cfg.weight_decay, cfg.l1_penalty)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut snapshot = None;
    let mut last_epoch_loss = 0.0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.lr_at_epoch(epoch);
        order.shuffle(shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if snapshot_at == Some(steps) {
                snapshot = Some(Snapshot::capture(model));
            }
            let (images, labels) = data.batch(chunk);
            let x: Tensor<T> = augment(&images, &cfg.augment, augment_rng)?.cast();
            let loss = step(model, masks, &mut state, x, &labels, objective, lr)?;
            epoch_loss += loss;
            batches += 1;
            steps += 1;
        }
        last_epoch_loss = epoch_loss / batches as f64;
    }
    if snapshot_at == Some(steps) && snapshot.is_none() {
        snapshot = Some(Snapshot::capture(model));
    }
    Ok(TrainOutcome {
        steps,
        last_epoch_loss,
        snapshot,
    })
}

/// One forward/backward/update on a prepared batch; returns the loss.
pub fn step<T: Scalar>(
    model: &mut Model<T>,
    masks: &MaskSet,
    state: &mut OptimizerState<T>,
    x: Tensor<T>,
    labels: &[usize],
    objective: Objective<'_, T>,
    lr: f64,
) -> Result<f64> {
    let teacher_logits = match objective {
        Objective::Distill { teacher, .. } => Some(teacher.predict(&x)?),
        Objective::CrossEntropy => None,
    };
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, x, Mode::Train)?;
    let loss = match (objective, &teacher_logits) {
        (Objective::Distill { config, .. }, Some(t)) => tape.distill(
            fwd.logits,
            t,
            labels,
            T::from_f64(config.alpha),
            T::from_f64(config.temperature),
        )?,
        _ => tape.cross_entropy(fwd.logits, labels)?,
    };
    let value = tape.value(loss).item().to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<T>> = fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
        .collect();
    masked_sgd_step(model.params_mut(), &grads, masks, state, lr)?;
    Ok(value)
}

/// Index of the largest entry per row; the first wins ties.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode top-1 accuracy against the dataset's (possibly noisy) labels.
pub fn accuracy<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk);
        let logits = model.predict(&images.cast())?;
        logits.ensure_finite("logits")?;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_clusters;
    use crate::model::build_mlp;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn learns_separable_clusters() {
        let ds = synth_clusters(200, 4, &[8], 6.0, 1).unwrap();
        let mut m: Model<f32> = build_mlp(&[1, 1, 8], &[16], 4, &mut rng(2)).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 20,
            lr: LrSchedule::constant(0.05),
            ..Default::default()
        };
        let before = accuracy(&m, &ds, 64).unwrap();
        let out = train(&mut m, &MaskSet::default(), &ds, &cfg, Objective::CrossEntropy, &mut rng(3), &mut rng(4), Some(0)).unwrap();
        assert_eq!(out.steps, 150);
        assert!(out.snapshot.is_some());
        let after = accuracy(&m, &ds, 64).unwrap();
        assert!(after > 0.95 && after > before, "{before} -> {after}");
    }

    #[test]
    fn masked_weights_stay_zero() {
        let ds = synth_clusters(60, 3, &[5], 3.0, 1).unwrap();
        let mut m: Model<f32> = build_mlp(&[1, 1, 5], &[6], 3, &mut rng(2)).unwrap();
        let masks = crate::sparsify::apply_prune(
            &mut m,
            &MaskSet::default(),
            0.5,
            crate::sparsify::PruneMethod::MagnitudeUnstructured,
            false,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        train(&mut m, &masks, &ds, &cfg, Objective::CrossEntropy, &mut rng(3), &mut rng(4), None).unwrap();
        for (i, mask) in masks.iter() {
            for (j, &w) in m.params()[i].value.data().iter().enumerate() {
                if !mask.is_kept(j) {
                    assert_eq!(w, 0.0);
                }
            }
        }
    }

    #[test]
    fn alpha_zero_distill_matches_cross_entropy() {
        let ds = synth_clusters(40, 2, &[3], 2.0, 5).unwrap();
        let base: Model<f64> = build_mlp(&[1, 1, 3], &[4], 2, &mut rng(7)).unwrap();
        let teacher: Model<f64> = build_mlp(&[1, 1, 3], &[4], 2, &mut rng(8)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let mut a = base.clone();
        let mut b = base.clone();
        let la = train(&mut a, &MaskSet::default(), &ds, &cfg, Objective::CrossEntropy, &mut rng(1), &mut rng(1), None).unwrap();
        let kd = Objective::Distill {
            teacher: &teacher,
            config: DistillConfig {
                alpha: 0.0,
                temperature: 4.0,
            },
        };
        let lb = train(&mut b, &MaskSet::default(), &ds, &cfg, kd, &mut rng(1), &mut rng(1), None).unwrap();
        assert!((la.last_epoch_loss - lb.last_epoch_loss).abs() < 1e-12);
        for (p, q) in a.params().iter().zip(b.params()) {
            assert!(p.value.max_abs_diff(&q.value) < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let ds = synth_clusters(40, 2, &[3], 2.0, 5).unwrap();
        let mut m: Model<f32> = build_mlp(&[1, 1, 3], &[4], 2, &mut rng(7)).unwrap();
        m.params_mut()[0].value.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let err = train(&mut m, &MaskSet::default(), &ds, &cfg, Objective::CrossEntropy, &mut rng(1), &mut rng(1), None)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
    }

    #[test]
    fn argmax_prefers_first_tie() {
        let t = Tensor::new([2, 3], vec![1.0f32, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), [1, 0]);
    }
}
