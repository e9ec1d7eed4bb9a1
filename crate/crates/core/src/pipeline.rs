//! Sweep controllers: iterative pruning with prune/perturb/train/evaluate
//! rounds, the distillation sweep, the entropy-gated early stop, phase
//! labelling and training-FLOPs accounting.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Dataset, Normalization};
use crate::entropy::{model_entropy, EntropyConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed;
use crate::sparsify::{advance_sparsity, apply_prune, perturb, MaskSet, Perturbation, PruneConfig, Snapshot};
use crate::train::{accuracy, train, Objective, TrainConfig};

/// Forward + backward relative to one forward pass.
pub const DEFAULT_PASS_FACTOR: u64 = 3;
pub const DEFAULT_PHASE_MARGIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub round: usize,
    pub sparsity: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub entropy_avg: f64,
    pub flops_cumulative: u64,
}

/// `per_sample_forward · pass_factor · n_samples · epochs`.
pub fn training_flops(per_sample_forward: u64, pass_factor: u64, epochs: usize, n_samples: usize) -> u64 {
    per_sample_forward * pass_factor * n_samples as u64 * epochs as u64
}

/// Train/val/test splits. `train` holds raw pixels for augmentation; the
/// `*_eval` copies carry the normalisation used at evaluation time.
#[derive(Debug, Clone)]
pub struct SweepData {
    pub train: Dataset,
    pub train_eval: Dataset,
    pub val_eval: Dataset,
    pub test_eval: Dataset,
}

impl SweepData {
    pub fn new(train: Dataset, val: Dataset, test: Dataset, normalization: Option<&Normalization>) -> Result<Self> {
        let prep = |d: &Dataset| -> Result<Dataset> {
            match normalization {
                Some(n) => {
                    let mut x = d.images().clone();
                    n.apply(&mut x)?;
                    d.map_images(|_| x)
                }
                None => Ok(d.clone()),
            }
        };
        Ok(Self {
            train_eval: prep(&train)?,
            val_eval: prep(&val)?,
            test_eval: prep(&test)?,
            train,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub prune: PruneConfig,
    pub train: TrainConfig,
    pub entropy: EntropyConfig,
    /// Master seed for shuffling, augmentation and reinitialisation streams.
    pub seed: u64,
    pub eval_batch: usize,
    pub pass_factor: u64,
    /// Extra cap on pruning rounds, on top of the sparsity wall.
    pub max_rounds: Option<usize>,
}

impl SweepConfig {
    pub fn new(prune: PruneConfig, train: TrainConfig, seed: u64) -> Self {
        Self {
            prune,
            train,
            entropy: EntropyConfig::default(),
            seed,
            eval_batch: 500,
            pass_factor: DEFAULT_PASS_FACTOR,
            max_rounds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    /// Earliest round with the highest validation accuracy.
    pub best_round: usize,
    pub best_model: Model<f32>,
    pub best_masks: MaskSet,
}

/// Round-by-round state of Alg. 1. Owns the model under pruning.
pub struct Sweep<'a> {
    model: Model<f32>,
    masks: MaskSet,
    cfg: &'a SweepConfig,
    data: &'a SweepData,
    objective: Objective<'a, f32>,
    snapshot: Option<Snapshot<f32>>,
    shuffle: seed::Rng,
    augment: seed::Rng,
    sparsity: f64,
    round: usize,
    flops_per_round: u64,
    flops: u64,
    records: Vec<RunRecord>,
}

impl<'a> Sweep<'a> {
    pub fn new(model: Model<f32>, cfg: &'a SweepConfig, data: &'a SweepData, objective: Objective<'a, f32>) -> Result<Self> {
        cfg.prune.validate()?;
        cfg.train.validate()?;
        let flops_per_round = training_flops(
            model.forward_flops_per_sample(),
            cfg.pass_factor,
            cfg.train.epochs,
            data.train.len(),
        );
        Ok(Self {
            masks: MaskSet::dense(&model),
            model,
            cfg,
            data,
            objective,
            snapshot: None,
            shuffle: seed::stream(cfg.seed, seed::STREAM_SHUFFLE),
            augment: seed::stream(cfg.seed, seed::STREAM_AUGMENT),
            sparsity: 0.0,
            round: 0,
            flops_per_round,
            flops: 0,
            records: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    /// True while the schedule is below the wall and the round cap allows more.
    pub fn can_continue(&self) -> bool {
        self.sparsity < self.cfg.prune.sparsity_wall && self.cfg.max_rounds.is_none_or(|m| self.round < m)
    }

    fn train_round(&mut self) -> Result<()> {
        let snapshot_at = (self.round == 0 && self.cfg.prune.perturbation == Perturbation::Rewind)
            .then_some(self.cfg.prune.rewind_iteration);
        let out = train(
            &mut self.model,
            &self.masks,
            &self.data.train,
            &self.cfg.train,
            self.objective,
            &mut self.shuffle,
            &mut self.augment,
            snapshot_at,
        )?;
        if snapshot_at.is_some() {
            self.snapshot = Some(out.snapshot.ok_or(Error::MissingSnapshot)?);
        }
        self.flops += self.flops_per_round;
        Ok(())
    }

    fn evaluate(&mut self) -> Result<RunRecord> {
        let b = self.cfg.eval_batch;
        let record = RunRecord {
            round: self.round,
            sparsity: self.sparsity,
            train_acc: accuracy(&self.model, &self.data.train_eval, b)?,
            val_acc: accuracy(&self.model, &self.data.val_eval, b)?,
            test_acc: accuracy(&self.model, &self.data.test_eval, b)?,
            entropy_avg: model_entropy(&self.model, &self.data.train_eval, &self.cfg.entropy)?.average,
            flops_cumulative: self.flops,
        };
        self.records.push(record);
        Ok(record)
    }

    /// Dense training; recorded as round 0.
    pub fn dense(&mut self) -> Result<RunRecord> {
        if !self.records.is_empty() {
            return Err(Error::invalid("dense", "the dense round already ran"));
        }
        self.train_round()?;
        self.evaluate()
    }

    /// Prune → perturb → train → evaluate at the configured per-round fraction.
    pub fn ppte(&mut self) -> Result<RunRecord> {
        self.ppte_with(self.cfg.prune.per_round_fraction)
    }

    pub fn ppte_with(&mut self, fraction: f64) -> Result<RunRecord> {
        if self.records.is_empty() {
            return Err(Error::invalid("ppte", "train the dense model first"));
        }
        self.round += 1;
        self.masks = apply_prune(&mut self.model, &self.masks, fraction, self.cfg.prune.method, self.cfg.prune.per_layer)?;
        let mut reinit = seed::substream(self.cfg.seed, seed::STREAM_REINIT, self.round as u64);
        perturb(
            &mut self.model,
            &self.masks,
            self.cfg.prune.perturbation,
            self.snapshot.as_ref(),
            &mut reinit,
        )?;
        self.sparsity = advance_sparsity(self.sparsity, fraction);
        self.train_round()?;
        self.evaluate()
    }

    pub fn into_parts(self) -> (Model<f32>, MaskSet, Vec<RunRecord>) {
        (self.model, self.masks, self.records)
    }
}

/// Index of the highest value, earliest on ties.
pub fn best_index(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Alg. 1: dense training, then rounds while the scheduled sparsity is below
/// the wall. `on_record` sees every record as it is produced.
pub fn iterative_prune_sweep(
    model: Model<f32>,
    cfg: &SweepConfig,
    data: &SweepData,
    objective: Objective<'_, f32>,
    on_record: &mut dyn FnMut(&RunRecord),
) -> Result<SweepResult> {
    let mut sweep = Sweep::new(model, cfg, data, objective)?;
    let first = sweep.dense()?;
    on_record(&first);
    let mut best = (first.val_acc, 0, sweep.model.clone(), sweep.masks.clone());
    while sweep.can_continue() {
        let r = sweep.ppte()?;
        on_record(&r);
        if r.val_acc > best.0 {
            best = (r.val_acc, r.round, sweep.model.clone(), sweep.masks.clone());
        }
    }
    Ok(SweepResult {
        records: sweep.records,
        best_round: best.1,
        best_model: best.2,
        best_masks: best.3,
    })
}

/// Pruning sweep of `student` under the distillation objective.
pub fn distill_sweep(
    student: Model<f32>,
    teacher: &Model<f32>,
    distill: crate::distill::DistillConfig,
    cfg: &SweepConfig,
    data: &SweepData,
    on_record: &mut dyn FnMut(&RunRecord),
) -> Result<SweepResult> {
    distill.validate()?;
    let objective = Objective::Distill {
        teacher,
        config: distill,
    };
    iterative_prune_sweep(student, cfg, data, objective, on_record)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopConfig {
    /// Entropy gate: phase 1 runs while η > η₀·T_E.
    pub entropy_threshold: f64,
    /// Accuracy gate: phase 2 runs while acc > best·T_A.
    pub accuracy_threshold: f64,
    /// Hard cap on pruning rounds.
    pub max_rounds: usize,
}

impl EarlyStopConfig {
    /// Guard defaults to the rounds needed to reach 99.9% sparsity.
    pub fn with_default_guard(entropy_threshold: f64, accuracy_threshold: f64, prune: &PruneConfig) -> Self {
        Self {
            entropy_threshold,
            accuracy_threshold,
            max_rounds: prune.rounds_to_reach(0.999),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("T_E", self.entropy_threshold), ("T_A", self.accuracy_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(name, "must lie in (0, 1)"));
            }
        }
        if self.max_rounds == 0 {
            return Err(Error::invalid("max_rounds", "must be at least 1"));
        }
        Ok(())
    }
}

/// Accuracy and entropy after one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundStats {
    pub accuracy: f64,
    pub entropy: f64,
}

impl From<&RunRecord> for RoundStats {
    fn from(r: &RunRecord) -> Self {
        Self {
            accuracy: r.val_acc,
            entropy: r.entropy_avg,
        }
    }
}

/// Something that can run the dense round and further pruning rounds.
pub trait RoundRunner {
    fn dense(&mut self) -> Result<RoundStats>;
    fn next_round(&mut self) -> Result<RoundStats>;
    /// Keeps the model produced by the latest round as the one to return.
    fn accept(&mut self);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    AccuracyDrop,
    Guard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStopOutcome {
    /// Pruning rounds executed (the dense round excluded).
    pub rounds_run: usize,
    /// Round after which the entropy gate flipped.
    pub gate_round: Option<usize>,
    /// Round whose model is returned.
    pub returned_round: usize,
    pub reason: StopReason,
}

/// Alg. 2. Phase 1 prunes while entropy stays above `η₀·T_E`; phase 2 keeps
/// pruning while accuracy stays above `best·T_A` and returns the last model
/// that satisfied it. Phase 2 always tries at least one round.
pub fn entropy_gated_early_stop<R: RoundRunner>(runner: &mut R, cfg: &EarlyStopConfig) -> Result<EarlyStopOutcome> {
    cfg.validate()?;
    let dense = runner.dense()?;
    runner.accept();
    let eta0 = dense.entropy;
    let mut best = dense.accuracy;
    let mut eta = eta0;
    let mut round = 0;
    let mut returned = 0;
    let guard = |round, gate, returned| EarlyStopOutcome {
        rounds_run: round,
        gate_round: gate,
        returned_round: returned,
        reason: StopReason::Guard,
    };

    while eta > eta0 * cfg.entropy_threshold {
        if round >= cfg.max_rounds {
            return Ok(guard(round, None, returned));
        }
        let s = runner.next_round()?;
        round += 1;
        runner.accept();
        returned = round;
        best = best.max(s.accuracy);
        eta = s.entropy;
    }
    let gate = Some(round);
    loop {
        if round >= cfg.max_rounds {
            return Ok(guard(round, gate, returned));
        }
        let s = runner.next_round()?;
        round += 1;
        if s.accuracy > best * cfg.accuracy_threshold {
            runner.accept();
            returned = round;
        } else {
            return Ok(EarlyStopOutcome {
                rounds_run: round,
                gate_round: gate,
                returned_round: returned,
                reason: StopReason::AccuracyDrop,
            });
        }
    }
}

/// Replays recorded per-round statistics (index 0 = dense).
#[derive(Debug, Clone)]
pub struct TraceRunner {
    stats: Vec<RoundStats>,
    next: usize,
    pub accepted: usize,
}

impl TraceRunner {
    pub fn new(stats: Vec<RoundStats>) -> Self {
        Self {
            stats,
            next: 0,
            accepted: 0,
        }
    }

    /// Entropy and accuracy traces of different lengths; missing entropy
    /// values repeat the last one.
    pub fn from_traces(accuracy: &[f64], entropy: &[f64]) -> Self {
        let stats = accuracy
            .iter()
            .enumerate()
            .map(|(i, &a)| RoundStats {
                accuracy: a,
                entropy: entropy.get(i).or(entropy.last()).copied().unwrap_or(0.0),
            })
            .collect();
        Self::new(stats)
    }

    pub fn consumed(&self) -> usize {
        self.next
    }

    fn pull(&mut self) -> Result<RoundStats> {
        let s = *self
            .stats
            .get(self.next)
            .ok_or_else(|| Error::invalid("trace", "exhausted"))?;
        self.next += 1;
        Ok(s)
    }
}

impl RoundRunner for TraceRunner {
    fn dense(&mut self) -> Result<RoundStats> {
        self.pull()
    }

    fn next_round(&mut self) -> Result<RoundStats> {
        self.pull()
    }

    fn accept(&mut self) {
        self.accepted = self.next - 1;
    }
}

/// Runs a live sweep under the controller and keeps the accepted model.
pub struct SweepRunner<'a> {
    pub sweep: Sweep<'a>,
    pub accepted: Option<(Model<f32>, MaskSet, RunRecord)>,
    pub on_record: &'a mut dyn FnMut(&RunRecord),
}

impl RoundRunner for SweepRunner<'_> {
    fn dense(&mut self) -> Result<RoundStats> {
        let r = self.sweep.dense()?;
        (self.on_record)(&r);
        Ok((&r).into())
    }

    fn next_round(&mut self) -> Result<RoundStats> {
        let r = self.sweep.ppte()?;
        (self.on_record)(&r);
        Ok((&r).into())
    }

    fn accept(&mut self) {
        if let Some(r) = self.sweep.records().last() {
            self.accepted = Some((self.sweep.model().clone(), self.sweep.masks().clone(), *r));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Light,
    Critical,
    Sweet,
    Collapsed,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Light => "light",
            Phase::Critical => "critical",
            Phase::Sweet => "sweet",
            Phase::Collapsed => "collapsed",
        }
    }
}

/// Splits an accuracy curve (index 0 = dense) into light, critical, sweet
/// and collapsed segments around the level `a₀ − margin`.
///
/// Critical is the first run below the level that is later followed by a
/// round at or above it; sweet runs from that recovery to the last round at
/// or above the level; everything after that is collapsed. Without a
/// critical run, rounds up to the last one at or above the level are light.
pub fn label_phases(accuracies: &[f64], margin: f64) -> Result<Vec<Phase>> {
    if accuracies.len() < 3 {
        return Err(Error::invalid("records", "need at least three rounds"));
    }
    let level = accuracies[0] - margin;
    let above = |a: f64| a >= level;
    let last_ok = accuracies.iter().rposition(|&a| above(a)).expect("round 0 is at the level");
    let mut phases = vec![Phase::Collapsed; accuracies.len()];
    let first_below = accuracies[..=last_ok].iter().position(|&a| !above(a));
    match first_below {
        Some(c) => {
            let recovery = c + accuracies[c..].iter().position(|&a| above(a)).expect("last_ok lies beyond c");
            phases[..c].fill(Phase::Light);
            phases[c..recovery].fill(Phase::Critical);
            phases[recovery..=last_ok].fill(Phase::Sweet);
        }
        None => phases[..=last_ok].fill(Phase::Light),
    }
    Ok(phases)
}

/// Largest drop below the running maximum at or before the curve's peak.
pub fn pre_peak_dip(accuracies: &[f64]) -> f64 {
    let Some(peak) = best_index(accuracies.iter().copied()) else {
        return 0.0;
    };
    let mut running = f64::NEG_INFINITY;
    let mut dip: f64 = 0.0;
    for &a in &accuracies[..=peak] {
        running = running.max(a);
        dip = dip.max(running - a);
    }
    dip
}
