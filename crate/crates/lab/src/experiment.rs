//! Builds data and models from a config and runs the subcommands.

use std::path::{Path, PathBuf};

use serde::Serialize;

use sdd_core::data::{self, AugmentSpec, Dataset, NoiseSpec, Normalization};
use sdd_core::distill::DistillConfig;
use sdd_core::entropy::{model_entropy, EntropyReport};
use sdd_core::model::{build_mlp, build_vgg, Model, VggSpec};
use sdd_core::pipeline::{
    distill_sweep, entropy_gated_early_stop, iterative_prune_sweep, EarlyStopOutcome, RunRecord, StopReason, Sweep,
    SweepConfig, SweepData, SweepResult, SweepRunner,
};
use sdd_core::seed;
use sdd_core::sparsify::MaskSet;
use sdd_core::train::{Objective, TrainConfig};

use crate::config::{DataSource, Experiment, ExperimentConfig, ModelFamily};
use crate::error::{LabError, Result};
use crate::io;

/// Training, validation and test data plus the normalisation fitted on the
/// training split.
pub struct Prepared {
    pub data: SweepData,
    pub normalization: Option<Normalization>,
    /// Which training labels were flipped by the noise.
    pub flipped: Vec<bool>,
}

fn load_sources(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Idx => {
            let path = |p: &Option<PathBuf>| p.clone().expect("validated");
            let mut train = io::load_idx(&path(&d.train_images), &path(&d.train_labels), d.num_classes)?;
            let mut test = io::load_idx(&path(&d.test_images), &path(&d.test_labels), d.num_classes)?;
            if let Some(n) = d.train_limit {
                train = train.take(n.min(train.len()));
            }
            if let Some(n) = d.test_limit {
                test = test.take(n.min(test.len()));
            }
            Ok((train, test))
        }
        DataSource::Synthetic => {
            let n = d.synthetic_train + d.synthetic_test;
            let seed = seed::stream_seed(cfg.seed, seed::STREAM_DATA);
            let all = data::synth_clusters(n, d.num_classes, &d.synthetic_shape, d.synthetic_separation, seed)?;
            let train: Vec<usize> = (0..d.synthetic_train).collect();
            let test: Vec<usize> = (d.synthetic_train..n).collect();
            Ok((all.subset(&train), all.subset(&test)))
        }
    }
}

/// Noise is injected into the whole training pool before the validation
/// split, so validation labels carry the same noise. The test set stays clean.
pub fn prepare_data(cfg: &ExperimentConfig, master_seed: u64) -> Result<Prepared> {
    let (pool, test) = load_sources(cfg)?;
    let (pool, flipped) = pool.with_noise(&NoiseSpec {
        epsilon: cfg.data.noise,
        seed: master_seed,
    })?;
    let mut rng = seed::stream(master_seed, seed::STREAM_SPLIT);
    let (train, val) = data::split(&pool, cfg.data.val_fraction, &mut rng)?;
    let normalization = if cfg.data.normalize {
        Some(Normalization::fit(train.images())?)
    } else {
        None
    };
    let data = SweepData::new(train, val, test, normalization.as_ref())?;
    Ok(Prepared {
        data,
        normalization,
        flipped,
    })
}

/// Fresh model initialised from the master seed's `init` stream.
pub fn build_model(cfg: &ExperimentConfig, sample_shape: &[usize], master_seed: u64) -> Result<Model<f32>> {
    let mut rng = seed::stream(master_seed, seed::STREAM_INIT);
    let m = &cfg.model;
    let classes = cfg.data.num_classes;
    Ok(match m.family {
        ModelFamily::Mlp => build_mlp(sample_shape, &m.widths, classes, &mut rng)?,
        ModelFamily::Vgg => {
            let [c, h, w] = sample_shape else {
                return Err(LabError::Config(format!(
                    "model.family: VGG needs image input, data has shape {sample_shape:?}"
                )));
            };
            build_vgg(&VggSpec::new(m.depth, m.width_exp, *c, (*h, *w), classes), &mut rng)?
        }
    })
}

pub fn sweep_config(cfg: &ExperimentConfig, master_seed: u64, normalization: Option<&Normalization>) -> Result<SweepConfig> {
    let train = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.lr_schedule(),
        momentum: cfg.train.momentum,
        weight_decay: cfg.train.weight_decay,
        l1_penalty: cfg.train.l1_penalty,
        augment: AugmentSpec {
            horizontal_flip: cfg.data.horizontal_flip,
            shift_px: cfg.data.shift_px,
            normalize: normalization.cloned(),
        },
    };
    let mut sc = SweepConfig::new(cfg.prune_config(), train, master_seed);
    sc.entropy = cfg.entropy_config()?;
    sc.eval_batch = cfg.train.eval_batch;
    sc.pass_factor = cfg.train.pass_factor;
    sc.max_rounds = cfg.prune.max_rounds;
    Ok(sc)
}

pub fn seed_dir(cfg: &ExperimentConfig, master_seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed-{master_seed}"))
}

/// `{seed}` in the teacher path expands to the master seed.
pub fn teacher_path(cfg: &ExperimentConfig, master_seed: u64) -> Option<PathBuf> {
    let d = cfg.distill.as_ref()?;
    let s = d.teacher.to_string_lossy().replace("{seed}", &master_seed.to_string());
    Some(PathBuf::from(s))
}

fn progress(tag: &str, r: &RunRecord) {
    eprintln!(
        "[{tag}] round {:>2} sparsity {:.4} train {:.4} val {:.4} test {:.4} entropy {:.4}",
        r.round, r.sparsity, r.train_acc, r.val_acc, r.test_acc, r.entropy_avg
    );
}

pub struct DenseRun {
    pub record: RunRecord,
    pub model: Model<f32>,
    pub masks: MaskSet,
}

/// Dense training only; writes `dense.ckpt` and `dense.csv`.
pub fn run_train(cfg: &ExperimentConfig, master_seed: u64) -> Result<DenseRun> {
    let p = prepare_data(cfg, master_seed)?;
    let sc = sweep_config(cfg, master_seed, p.normalization.as_ref())?;
    let model = build_model(cfg, p.data.train.sample_shape(), master_seed)?;
    let mut sweep = Sweep::new(model, &sc, &p.data, Objective::CrossEntropy)?;
    let record = sweep.dense()?;
    progress(&format!("seed {master_seed}"), &record);
    let (model, masks, _) = sweep.into_parts();
    let dir = seed_dir(cfg, master_seed);
    io::save_checkpoint(&dir.join("dense.ckpt"), &model, &masks)?;
    io::write_csv(&dir.join("dense.csv"), &[record])?;
    Ok(DenseRun { record, model, masks })
}

fn load_teacher(cfg: &ExperimentConfig, master_seed: u64, sample_shape: &[usize]) -> Result<Model<f32>> {
    let path = teacher_path(cfg, master_seed).ok_or_else(|| LabError::Config("distill.teacher: missing".into()))?;
    let mut teacher = build_model(cfg, sample_shape, master_seed)?;
    let masks = io::load_checkpoint(&path, &mut teacher)?;
    masks.apply_to(teacher.params_mut());
    Ok(teacher)
}

/// Vanilla or distillation sweep; writes `sweep.csv`, `best.ckpt` and
/// `summary.json`.
pub fn run_sweep(cfg: &ExperimentConfig, master_seed: u64, distill: bool) -> Result<SweepResult> {
    let p = prepare_data(cfg, master_seed)?;
    let sc = sweep_config(cfg, master_seed, p.normalization.as_ref())?;
    let shape = p.data.train.sample_shape().to_vec();
    let model = build_model(cfg, &shape, master_seed)?;
    let dir = seed_dir(cfg, master_seed);
    let tag = format!("seed {master_seed}");
    let mut on_record = |r: &RunRecord| progress(&tag, r);
    let result = if distill {
        let teacher = load_teacher(cfg, master_seed, &shape)?;
        let d = cfg.distill.as_ref().expect("validated");
        let dc = DistillConfig {
            alpha: d.alpha,
            temperature: d.temperature,
        };
        distill_sweep(model, &teacher, dc, &sc, &p.data, &mut on_record)?
    } else {
        iterative_prune_sweep(model, &sc, &p.data, Objective::CrossEntropy, &mut on_record)?
    };
    io::write_csv(&dir.join("sweep.csv"), &result.records)?;
    io::save_checkpoint(&dir.join("best.ckpt"), &result.best_model, &result.best_masks)?;
    io::write_json(&dir.join("summary.json"), &io::summarize(&result.records, cfg.report.margin)?)?;
    Ok(result)
}

#[derive(Debug, Clone, Serialize)]
pub struct EarlyStopSummary {
    pub rounds_run: usize,
    pub gate_round: Option<usize>,
    pub returned_round: usize,
    pub returned_sparsity: f64,
    pub returned_val_acc: f64,
    pub returned_test_acc: f64,
    pub reason: &'static str,
    pub flops_cumulative: u64,
}

pub struct EarlyStopRun {
    pub outcome: EarlyStopOutcome,
    pub records: Vec<RunRecord>,
    pub model: Model<f32>,
    pub masks: MaskSet,
    pub summary: EarlyStopSummary,
}

/// Entropy-gated controller over a live sweep; writes `early_stop.csv`,
/// `returned.ckpt` and `summary.json`.
pub fn run_early_stop(cfg: &ExperimentConfig, master_seed: u64) -> Result<EarlyStopRun> {
    let p = prepare_data(cfg, master_seed)?;
    let mut sc = sweep_config(cfg, master_seed, p.normalization.as_ref())?;
    let es = cfg.early_stop_config();
    // The controller has its own guard.
    sc.max_rounds = None;
    let model = build_model(cfg, p.data.train.sample_shape(), master_seed)?;
    let tag = format!("seed {master_seed}");
    let mut on_record = |r: &RunRecord| progress(&tag, r);
    let sweep = Sweep::new(model, &sc, &p.data, Objective::CrossEntropy)?;
    let mut runner = SweepRunner {
        sweep,
        accepted: None,
        on_record: &mut on_record,
    };
    let outcome = entropy_gated_early_stop(&mut runner, &es)?;
    let (model, masks, rec) = runner.accepted.take().expect("dense round is always accepted");
    let records = runner.sweep.records().to_vec();
    let summary = EarlyStopSummary {
        rounds_run: outcome.rounds_run,
        gate_round: outcome.gate_round,
        returned_round: outcome.returned_round,
        returned_sparsity: rec.sparsity,
        returned_val_acc: rec.val_acc,
        returned_test_acc: rec.test_acc,
        reason: match outcome.reason {
            StopReason::AccuracyDrop => "accuracy_drop",
            StopReason::Guard => "guard",
        },
        flops_cumulative: records.last().map_or(0, |r| r.flops_cumulative),
    };
    let dir = seed_dir(cfg, master_seed);
    io::write_csv(&dir.join("early_stop.csv"), &records)?;
    io::save_checkpoint(&dir.join("returned.ckpt"), &model, &masks)?;
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok(EarlyStopRun {
        outcome,
        records,
        model,
        masks,
        summary,
    })
}

/// Entropy of a saved checkpoint on the (normalised) training split.
pub fn run_entropy(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EntropyReport> {
    let p = prepare_data(cfg, cfg.seed)?;
    let mut model = build_model(cfg, p.data.train.sample_shape(), cfg.seed)?;
    let masks = io::load_checkpoint(checkpoint, &mut model)?;
    masks.apply_to(model.params_mut());
    Ok(model_entropy(&model, &p.data.train_eval, &cfg.entropy_config()?)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EntropyJson {
    pub average: f64,
    pub sample_count: usize,
    pub per_layer: Vec<(String, f64)>,
}

impl From<&EntropyReport> for EntropyJson {
    fn from(r: &EntropyReport) -> Self {
        Self {
            average: r.average,
            sample_count: r.sample_count,
            per_layer: r.per_layer.clone(),
        }
    }
}

/// Runs `job` for every master seed. Seeds run on up to `threads` worker
/// threads; each seed writes only to its own directory so the outputs do not
/// depend on the thread count.
pub fn for_each_seed<T: Send>(seeds: &[u64], threads: usize, job: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.max(1).min(seeds.len().max(1));
    if threads == 1 {
        return seeds.iter().map(|&s| job(s)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..seeds.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let r = job(seeds[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every seed ran")).collect()
}

/// Worker threads from `SDD_LAB_THREADS`; 1 means strictly sequential.
pub fn thread_count() -> Result<usize> {
    match std::env::var("SDD_LAB_THREADS") {
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(LabError::Config(format!("SDD_LAB_THREADS: expected a positive integer, got {v:?}"))),
        },
    }
}

/// Rejects a subcommand that does not match the configured experiment.
pub fn expect_experiment(cfg: &ExperimentConfig, wanted: Experiment) -> Result<()> {
    if cfg.experiment != wanted {
        return Err(LabError::Config(format!(
            "experiment: config selects {:?} but the subcommand runs {:?}",
            cfg.experiment, wanted
        )));
    }
    Ok(())
}
