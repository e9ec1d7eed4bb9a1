//! Masks, global magnitude pruning, structured ℓ1 filter pruning, and the
//! post-prune perturbation modes.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::{Model, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary keep/drop flags for one prunable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn drop(&mut self, i: usize) {
        self.bits[i] = false;
    }
}

/// Masks keyed by parameter index. Parameters without an entry are dense.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskSet {
    masks: BTreeMap<usize, Mask>,
}

impl MaskSet {
    /// All-ones masks over every prunable parameter of `model`.
    pub fn dense<T: Scalar>(model: &Model<T>) -> Self {
        let masks = model
            .prunable_indices()
            .map(|i| (i, Mask::ones(model.params()[i].value.numel())))
            .collect();
        Self { masks }
    }

    pub fn get(&self, param: usize) -> Option<&Mask> {
        self.masks.get(&param)
    }

    pub fn insert(&mut self, param: usize, mask: Mask) {
        self.masks.insert(param, mask);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Mask)> {
        self.masks.iter().map(|(&i, m)| (i, m))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn total(&self) -> usize {
        self.masks.values().map(Mask::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.masks.values().map(Mask::kept).sum()
    }

    /// Sets every masked entry to exactly zero.
    pub fn apply_to<T: Scalar>(&self, params: &mut [Param<T>]) {
        for (&i, m) in &self.masks {
            for (w, &keep) in params[i].value.data_mut().iter_mut().zip(&m.bits) {
                if !keep {
                    *w = T::ZERO;
                }
            }
        }
    }

    /// True when every kept entry of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &MaskSet) -> bool {
        self.masks.iter().all(|(i, m)| match other.masks.get(i) {
            Some(o) => m.bits.iter().zip(&o.bits).all(|(&a, &b)| !a || b),
            None => true,
        })
    }

    /// Rejects masks that cover non-prunable parameters or mismatch shapes.
    pub fn validate_for<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        for (&i, m) in &self.masks {
            let p = model
                .params()
                .get(i)
                .ok_or_else(|| Error::invalid("mask", "parameter index out of range"))?;
            if !p.prunable {
                return Err(Error::invalid("mask", "only conv and dense weights may be masked"));
            }
            if p.value.numel() != m.len() {
                return Err(Error::shape("mask", &[p.value.numel()], &[m.len()]));
            }
        }
        Ok(())
    }
}

/// Fraction of masked entries over all masked-able parameters.
pub fn sparsity_of(masks: &MaskSet) -> f64 {
    let total = masks.total();
    if total == 0 {
        return 0.0;
    }
    (total - masks.kept()) as f64 / total as f64
}

/// `1 − (1 − current)(1 − fraction)`
pub fn advance_sparsity(current: f64, fraction: f64) -> f64 {
    1.0 - (1.0 - current) * (1.0 - fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMethod {
    MagnitudeUnstructured,
    L1Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// Surviving weights return to the snapshot.
    Rewind,
    /// Surviving weights are redrawn from the initializer.
    Reinit,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    /// Fraction of surviving weights removed per round.
    pub per_round_fraction: f64,
    /// Target sparsity that ends a sweep.
    pub sparsity_wall: f64,
    pub method: PruneMethod,
    pub perturbation: Perturbation,
    /// Optimizer steps into the dense run at which the rewind snapshot is taken.
    pub rewind_iteration: usize,
    /// Rank magnitudes within each layer instead of across the whole model.
    pub per_layer: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            per_round_fraction: 0.2,
            sparsity_wall: 0.99,
            method: PruneMethod::MagnitudeUnstructured,
            perturbation: Perturbation::None,
            rewind_iteration: 0,
            per_layer: false,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.per_round_fraction > 0.0 && self.per_round_fraction < 1.0) {
            return Err(Error::invalid("per_round_fraction", "must lie in (0, 1)"));
        }
        if !(self.sparsity_wall > 0.0 && self.sparsity_wall <= 1.0) {
            return Err(Error::invalid("sparsity_wall", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Rounds needed until the sparsity schedule reaches `target`.
    pub fn rounds_to_reach(&self, target: f64) -> usize {
        let mut s = 0.0;
        let mut rounds = 0;
        while s < target && rounds < 10_000 {
            s = advance_sparsity(s, self.per_round_fraction);
            rounds += 1;
        }
        rounds
    }
}

/// Parameter values captured at the rewind point.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T = f32> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Snapshot<T> {
    pub fn capture(model: &Model<T>) -> Self {
        Self {
            values: model.params().iter().map(|p| p.value.clone()).collect(),
        }
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }
}

/// Magnitude cut of one pruning step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    /// Largest pruned magnitude (the ζ-quantile of surviving |w|).
    pub magnitude: f64,
    /// Number of surviving weights the step removes.
    pub count: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    magnitude: f64,
    param: usize,
    elem: usize,
}

fn cmp_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    a.magnitude
        .partial_cmp(&b.magnitude)
        .unwrap_or(Ordering::Equal)
        .then(a.param.cmp(&b.param))
        .then(a.elem.cmp(&b.elem))
}

fn surviving<T: Scalar>(model: &Model<T>, masks: &MaskSet, only: Option<usize>) -> Vec<Candidate> {
    let mut out = Vec::new();
    for pi in model.prunable_indices() {
        if only.is_some_and(|o| o != pi) {
            continue;
        }
        let mask = masks.get(pi);
        for (ei, &w) in model.params()[pi].value.data().iter().enumerate() {
            if mask.is_none_or(|m| m.is_kept(ei)) {
                out.push(Candidate {
                    magnitude: w.abs().to_f64(),
                    param: pi,
                    elem: ei,
                });
            }
        }
    }
    out
}

/// Orders candidates so the first `k` are the ones to prune; ties broken by
/// (parameter index, element index).
fn select_lowest(cands: &mut [Candidate], k: usize) -> Option<f64> {
    if k == 0 {
        return None;
    }
    cands.select_nth_unstable_by(k - 1, cmp_candidates);
    Some(cands[k - 1].magnitude)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("fraction", "must lie in [0, 1)"));
    }
    Ok(())
}

/// ζ-quantile of surviving |w| pooled across every prunable tensor.
pub fn magnitude_threshold<T: Scalar>(model: &Model<T>, masks: &MaskSet, fraction: f64) -> Result<Threshold> {
    check_fraction(fraction)?;
    let mut cands = surviving(model, masks, None);
    if cands.is_empty() {
        return Err(Error::NoSurvivingWeights);
    }
    let count = (fraction * cands.len() as f64) as usize;
    let magnitude = match select_lowest(&mut cands, count) {
        Some(m) => m,
        // nothing pruned: the cut sits strictly below the smallest magnitude
        None => cands.iter().map(|c| c.magnitude).fold(f64::INFINITY, f64::min) * 0.5 - f64::MIN_POSITIVE,
    };
    Ok(Threshold { magnitude, count })
}

/// Masks `⌊ζ·surviving⌋` more weights (unstructured) or `⌊ζ·filters⌋` whole
/// conv filters per layer (structured), zeroing them in `model`.
pub fn apply_prune<T: Scalar>(
    model: &mut Model<T>,
    masks: &MaskSet,
    fraction: f64,
    method: PruneMethod,
    per_layer: bool,
) -> Result<MaskSet> {
    check_fraction(fraction)?;
    let mut next = masks.clone();
    for pi in model.prunable_indices() {
        if next.get(pi).is_none() {
            next.insert(pi, Mask::ones(model.params()[pi].value.numel()));
        }
    }
    if fraction == 0.0 {
        return Ok(next);
    }
    match method {
        PruneMethod::MagnitudeUnstructured => {
            let groups: Vec<Option<usize>> = if per_layer {
                model.prunable_indices().map(Some).collect()
            } else {
                vec![None]
            };
            let mut any = false;
            for only in groups {
                let mut cands = surviving(model, masks, only);
                any |= !cands.is_empty();
                let k = (fraction * cands.len() as f64) as usize;
                if select_lowest(&mut cands, k).is_some() {
                    for c in &cands[..k] {
                        next.masks.get_mut(&c.param).expect("inserted above").drop(c.elem);
                    }
                }
            }
            if !any {
                return Err(Error::NoSurvivingWeights);
            }
        }
        PruneMethod::L1Structured => {
            for pi in model.prunable_indices().collect::<Vec<_>>() {
                let p = &model.params()[pi];
                if !matches!(model.layers()[p.layer], LayerSpec::Conv2d { .. }) {
                    continue;
                }
                let filters = p.value.shape()[0];
                let per = p.value.numel() / filters;
                let mask = next.masks.get_mut(&pi).expect("inserted above");
                let mut alive: Vec<(f64, usize)> = (0..filters)
                    .filter(|&f| (0..per).any(|e| mask.is_kept(f * per + e)))
                    .map(|f| {
                        let norm = p.value.data()[f * per..(f + 1) * per]
                            .iter()
                            .enumerate()
                            .filter(|(e, _)| mask.is_kept(f * per + e))
                            .map(|(_, w)| w.abs().to_f64())
                            .sum::<f64>();
                        (norm, f)
                    })
                    .collect();
                let k = (fraction * alive.len() as f64) as usize;
                alive.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
                for &(_, f) in &alive[..k] {
                    for e in 0..per {
                        mask.drop(f * per + e);
                    }
                }
            }
        }
    }
    next.apply_to(model.params_mut());
    Ok(next)
}

/// Applies the post-prune perturbation. Masked weights end at zero in every
/// mode; rewind and reinit also reset batchnorm running statistics.
pub fn perturb<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    masks: &MaskSet,
    mode: Perturbation,
    snapshot: Option<&Snapshot<T>>,
    rng: &mut R,
) -> Result<()> {
    match mode {
        Perturbation::None => return Ok(()),
        Perturbation::Rewind => {
            let snap = snapshot.ok_or(Error::MissingSnapshot)?;
            model.set_param_values(snap.values.clone())?;
        }
        Perturbation::Reinit => {
            let fresh = model.sample_init(rng);
            model.set_param_values(fresh)?;
        }
    }
    masks.apply_to(model.params_mut());
    model.reset_bn_stats();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mlp;
    use alloc::string::String;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(weights: &[f64]) -> Model<f64> {
        let layers = vec![(
            String::from("fc"),
            LayerSpec::Dense {
                in_features: weights.len(),
                out_features: 1,
            },
        )];
        let mut m = Model::from_layers(vec![weights.len()], layers, 1).unwrap();
        m.params_mut()[0].value = Tensor::from_f64([1, weights.len()], weights).unwrap();
        m
    }

    #[test]
    fn quantile_prunes_smallest_half() {
        let mut m = single_layer(&[0.3, -0.1, 0.5, 0.2]);
        let masks = MaskSet::dense(&m);
        let t = magnitude_threshold(&m, &masks, 0.5).unwrap();
        assert_eq!(t.count, 2);
        assert!((t.magnitude - 0.2).abs() < 1e-12);
        let next = apply_prune(&mut m, &masks, 0.5, PruneMethod::MagnitudeUnstructured, false).unwrap();
        assert_eq!(next.get(0).unwrap().bits(), &[true, false, true, false]);
        assert_eq!(m.params()[0].value.data(), &[0.3, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn tiny_fraction_prunes_nothing() {
        let mut m = single_layer(&[0.3, -0.1, 0.5, 0.2]);
        let masks = MaskSet::dense(&m);
        let t = magnitude_threshold(&m, &masks, 1e-9).unwrap();
        assert_eq!(t.count, 0);
        assert!(t.magnitude < 0.1);
        let next = apply_prune(&mut m, &masks, 1e-9, PruneMethod::MagnitudeUnstructured, false).unwrap();
        assert_eq!(next, masks);
    }

    #[test]
    fn ties_follow_index_order() {
        let mut m = single_layer(&[0.5; 7]);
        let masks = MaskSet::dense(&m);
        let next = apply_prune(&mut m, &masks, 0.5, PruneMethod::MagnitudeUnstructured, false).unwrap();
        assert_eq!(next.get(0).unwrap().bits(), &[false, false, false, true, true, true, true]);
    }

    #[test]
    fn zero_fraction_is_identity_and_one_is_rejected() {
        let mut m = single_layer(&[0.3, -0.1]);
        let masks = MaskSet::dense(&m);
        assert_eq!(apply_prune(&mut m, &masks, 0.0, PruneMethod::MagnitudeUnstructured, false).unwrap(), masks);
        assert!(apply_prune(&mut m, &masks, 1.0, PruneMethod::MagnitudeUnstructured, false).is_err());
    }

    #[test]
    fn two_rounds_compose() {
        let w: Vec<f64> = (1..=100).map(|i| i as f64 * 0.01).collect();
        let mut m = single_layer(&w);
        let mut masks = MaskSet::dense(&m);
        for _ in 0..2 {
            masks = apply_prune(&mut m, &masks, 0.2, PruneMethod::MagnitudeUnstructured, false).unwrap();
        }
        assert_eq!(masks.total() - masks.kept(), 36);
        assert!((sparsity_of(&masks) - 0.36).abs() < 1e-12);
    }

    #[test]
    fn no_survivors_is_an_error() {
        let m = single_layer(&[0.3, -0.1]);
        let masks = {
            let mut s = MaskSet::default();
            s.insert(0, Mask::from_bits(vec![false, false]));
            s
        };
        assert_eq!(magnitude_threshold(&m, &masks, 0.5).unwrap_err(), Error::NoSurvivingWeights);
    }

    #[test]
    fn sparsity_bookkeeping() {
        let mut s = MaskSet::default();
        s.insert(0, Mask::ones(10));
        assert_eq!(sparsity_of(&s), 0.0);
        s.insert(0, Mask::from_bits(vec![false; 10]));
        assert_eq!(sparsity_of(&s), 1.0);
        assert!((advance_sparsity(0.2, 0.2) - 0.36).abs() < 1e-15);
        assert_eq!(advance_sparsity(0.37, 0.0), 0.37);
        let mut z = 0.0;
        for _ in 0..10 {
            z = advance_sparsity(z, 0.2);
        }
        assert!((z - (1.0 - 0.8f64.powi(10))).abs() < 1e-12);
        assert!((z - 0.8926).abs() < 1e-4);
    }

    #[test]
    fn rewind_none_reinit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m: Model<f32> = build_mlp(&[6], &[5], 3, &mut rng).unwrap();
        let snap = Snapshot::capture(&m);
        // drift the weights
        for p in m.params_mut() {
            for v in p.value.data_mut() {
                *v += 0.25;
            }
        }
        let masks = apply_prune(&mut m, &MaskSet::default(), 0.3, PruneMethod::MagnitudeUnstructured, false).unwrap();

        let before = m.clone();
        perturb(&mut m, &masks, Perturbation::None, None, &mut rng).unwrap();
        assert_eq!(m, before);

        assert_eq!(
            perturb(&mut m, &masks, Perturbation::Rewind, None, &mut rng).unwrap_err(),
            Error::MissingSnapshot
        );
        perturb(&mut m, &masks, Perturbation::Rewind, Some(&snap), &mut rng).unwrap();
        for (i, p) in m.params().iter().enumerate() {
            for (j, (&v, &s)) in p.value.data().iter().zip(snap.values()[i].data()).enumerate() {
                match masks.get(i) {
                    Some(mask) if !mask.is_kept(j) => assert_eq!(v, 0.0),
                    _ => assert_eq!(v.to_bits(), s.to_bits()),
                }
            }
        }

        let mut a = before.clone();
        let mut b = before.clone();
        perturb(&mut a, &masks, Perturbation::Reinit, None, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        perturb(&mut b, &masks, Perturbation::Reinit, None, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, before);
    }

    #[test]
    fn structured_removes_lowest_l1_filters() {
        let layers = vec![
            (
                String::from("conv"),
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                },
            ),
            (String::from("flat"), LayerSpec::Flatten),
            (
                String::from("fc"),
                LayerSpec::Dense {
                    in_features: 16,
                    out_features: 2,
                },
            ),
        ];
        let mut m: Model<f64> = Model::from_layers(vec![1, 2, 2], layers, 2).unwrap();
        let norms = [3.0, 1.0, 4.0, 2.0];
        let w: Vec<f64> = norms.iter().flat_map(|&n| [n / 9.0; 9]).collect();
        m.params_mut()[0].value = Tensor::from_f64([4, 1, 3, 3], &w).unwrap();
        let masks = apply_prune(&mut m, &MaskSet::default(), 0.5, PruneMethod::L1Structured, false).unwrap();
        let bits = masks.get(0).unwrap().bits();
        let alive: Vec<bool> = (0..4).map(|f| bits[f * 9]).collect();
        assert_eq!(alive, [true, false, true, false]);
        // dense layer untouched by structured pruning
        assert_eq!(masks.get(2).unwrap().kept(), 32);
    }
}
