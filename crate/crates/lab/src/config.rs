//! Experiment configuration: one TOML file per experiment plus dotted-key
//! overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdd_core::data::MAX_SHIFT_PX;
use sdd_core::distill::{DEFAULT_ALPHA, DEFAULT_TEMPERATURE};
use sdd_core::entropy::{ConvNeuron, EntropyConfig, LogBase};
use sdd_core::optim::LrSchedule;
use sdd_core::pipeline::{EarlyStopConfig, DEFAULT_PASS_FACTOR, DEFAULT_PHASE_MARGIN};
use sdd_core::sparsify::{Perturbation, PruneConfig, PruneMethod};

use crate::error::{LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Sweep,
    Distill,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Extra master seeds run as independent replicas.
    #[serde(default)]
    pub replicas: Vec<u64>,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub entropy: EntropySection,
    pub distill: Option<DistillSection>,
    pub early_stop: Option<EarlyStopSection>,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Vgg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: ModelFamily,
    /// VGG depth δ (number of conv groups).
    #[serde(default = "one")]
    pub depth: usize,
    /// VGG width exponent γ (first group has 2^γ filters).
    #[serde(default = "four")]
    pub width_exp: u32,
    /// MLP hidden widths.
    #[serde(default)]
    pub widths: Vec<usize>,
}

fn one() -> usize {
    1
}

fn four() -> u32 {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Idx,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// Use only the first N training (and test) samples of the IDX files.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default = "ten")]
    pub num_classes: usize,
    /// Synthetic clusters: samples, per-sample shape and centre distance.
    #[serde(default)]
    pub synthetic_train: usize,
    #[serde(default)]
    pub synthetic_test: usize,
    #[serde(default)]
    pub synthetic_shape: Vec<usize>,
    #[serde(default)]
    pub synthetic_separation: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub horizontal_flip: bool,
    #[serde(default)]
    pub shift_px: usize,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn ten() -> usize {
    10
}

fn yes() -> bool {
    true
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_drop")]
    pub drop_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub l1_penalty: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_pass_factor")]
    pub pass_factor: u64,
}

fn default_batch() -> usize {
    128
}

fn default_drop() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    0.9
}

fn default_eval_batch() -> usize {
    500
}

fn default_pass_factor() -> u64 {
    DEFAULT_PASS_FACTOR
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Magnitude,
    L1Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationName {
    Rewind,
    Reinit,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_wall")]
    pub wall: f64,
    /// Optional cap on pruning rounds.
    #[serde(default)]
    pub max_rounds: Option<usize>,
    #[serde(default = "default_method")]
    pub method: MethodName,
    #[serde(default = "default_perturbation")]
    pub perturbation: PerturbationName,
    #[serde(default)]
    pub rewind_iteration: usize,
    #[serde(default)]
    pub per_layer: bool,
}

fn default_fraction() -> f64 {
    0.2
}

fn default_wall() -> f64 {
    0.99
}

fn default_method() -> MethodName {
    MethodName::Magnitude
}

fn default_perturbation() -> PerturbationName {
    PerturbationName::None
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            fraction: default_fraction(),
            wall: default_wall(),
            max_rounds: None,
            method: default_method(),
            perturbation: default_perturbation(),
            rewind_iteration: 0,
            per_layer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropySection {
    #[serde(default = "default_base")]
    pub base: String,
    #[serde(default = "default_neuron")]
    pub conv_neuron: String,
}

fn default_base() -> String {
    "bits".into()
}

fn default_neuron() -> String {
    "channel".into()
}

impl Default for EntropySection {
    fn default() -> Self {
        Self {
            base: default_base(),
            conv_neuron: default_neuron(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub teacher: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopSection {
    #[serde(default = "default_te")]
    pub entropy_threshold: f64,
    #[serde(default = "default_ta")]
    pub accuracy_threshold: f64,
    #[serde(default)]
    pub max_rounds: Option<usize>,
}

fn default_te() -> f64 {
    0.8
}

fn default_ta() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    DEFAULT_PHASE_MARGIN
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            margin: default_margin(),
        }
    }
}

fn bad(key: &str, reason: impl std::fmt::Display) -> LabError {
    LabError::Config(format!("{key}: {reason}"))
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            set_dotted(&mut value, key, raw)?;
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data, teacher and output paths resolve
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.data.train_images,
            &mut self.data.train_labels,
            &mut self.data.test_images,
            &mut self.data.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(d) = &mut self.distill {
            fix(&mut d.teacher);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad("schema_version", format!("expected {SCHEMA_VERSION}, found {}", self.schema_version)));
        }
        match self.model.family {
            ModelFamily::Mlp if self.model.widths.is_empty() => return Err(bad("model.widths", "an MLP needs hidden widths")),
            ModelFamily::Mlp if self.model.widths.contains(&0) => return Err(bad("model.widths", "widths must be positive")),
            ModelFamily::Vgg if !(1..=5).contains(&self.model.depth) => return Err(bad("model.depth", "must lie in [1, 5]")),
            ModelFamily::Vgg if self.model.width_exp < 3 => return Err(bad("model.width_exp", "must be at least 3")),
            _ => {}
        }
        let d = &self.data;
        match d.source {
            DataSource::Idx => {
                for (k, v) in [
                    ("data.train_images", &d.train_images),
                    ("data.train_labels", &d.train_labels),
                    ("data.test_images", &d.test_images),
                    ("data.test_labels", &d.test_labels),
                ] {
                    if v.is_none() {
                        return Err(bad(k, "required for IDX data"));
                    }
                }
            }
            DataSource::Synthetic => {
                if d.synthetic_train < d.num_classes || d.synthetic_test == 0 {
                    return Err(bad("data.synthetic_train", "need at least one sample per class and a test set"));
                }
                if !matches!(d.synthetic_shape.len(), 1 | 3) {
                    return Err(bad("data.synthetic_shape", "expected [D] or [C, H, W]"));
                }
            }
        }
        if d.num_classes < 2 {
            return Err(bad("data.num_classes", "at least two classes"));
        }
        if !(0.0..=1.0).contains(&d.noise) {
            return Err(bad("data.noise", "must lie in [0, 1]"));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(bad("data.val_fraction", "must lie in (0, 1)"));
        }
        if d.shift_px > MAX_SHIFT_PX {
            return Err(bad("data.shift_px", "at most 4 pixels"));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(bad("train.batch_size", "must be positive"));
        }
        if !(t.lr > 0.0) {
            return Err(bad("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(bad("train.momentum", "must lie in [0, 1)"));
        }
        if t.weight_decay < 0.0 || t.l1_penalty < 0.0 {
            return Err(bad("train.weight_decay", "penalties must be non-negative"));
        }
        if !(t.drop_factor > 0.0 && t.drop_factor <= 1.0) {
            return Err(bad("train.drop_factor", "must lie in (0, 1]"));
        }
        if t.milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad("train.milestones", "must be ascending"));
        }
        let p = &self.prune;
        if !(p.fraction > 0.0 && p.fraction < 1.0) {
            return Err(bad("prune.fraction", "must lie in (0, 1)"));
        }
        if !(p.wall > 0.0 && p.wall <= 1.0) {
            return Err(bad("prune.wall", "must lie in (0, 1]"));
        }
        self.entropy_config()?;
        if let Some(ds) = &self.distill {
            if !(0.0..=1.0).contains(&ds.alpha) {
                return Err(bad("distill.alpha", "must lie in [0, 1]"));
            }
            if !(ds.temperature > 0.0) {
                return Err(bad("distill.temperature", "must be positive"));
            }
        }
        if self.experiment == Experiment::Distill && self.distill.is_none() {
            return Err(bad("distill", "a distill experiment needs a [distill] section"));
        }
        if let Some(es) = &self.early_stop {
            self.early_stop_config_from(es).validate().map_err(|e| bad("early_stop", e))?;
        }
        if !(self.report.margin >= 0.0) {
            return Err(bad("report.margin", "must be non-negative"));
        }
        Ok(())
    }

    pub fn prune_config(&self) -> PruneConfig {
        let p = &self.prune;
        PruneConfig {
            per_round_fraction: p.fraction,
            sparsity_wall: p.wall,
            method: match p.method {
                MethodName::Magnitude => PruneMethod::MagnitudeUnstructured,
                MethodName::L1Structured => PruneMethod::L1Structured,
            },
            perturbation: match p.perturbation {
                PerturbationName::Rewind => Perturbation::Rewind,
                PerturbationName::Reinit => Perturbation::Reinit,
                PerturbationName::None => Perturbation::None,
            },
            rewind_iteration: p.rewind_iteration,
            per_layer: p.per_layer,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.train.lr,
            milestones: self.train.milestones.clone(),
            drop_factor: self.train.drop_factor,
        }
    }

    pub fn entropy_config(&self) -> Result<EntropyConfig> {
        let base = match self.entropy.base.as_str() {
            "bits" => LogBase::Bits,
            "nats" => LogBase::Nats,
            other => return Err(bad("entropy.base", format!("unknown base {other:?}"))),
        };
        let conv_neuron = match self.entropy.conv_neuron.as_str() {
            "channel" => ConvNeuron::Channel,
            "position" => ConvNeuron::Position,
            other => return Err(bad("entropy.conv_neuron", format!("unknown mode {other:?}"))),
        };
        Ok(EntropyConfig {
            base,
            conv_neuron,
            batch_size: self.train.eval_batch,
        })
    }

    fn early_stop_config_from(&self, es: &EarlyStopSection) -> EarlyStopConfig {
        let mut c = EarlyStopConfig::with_default_guard(es.entropy_threshold, es.accuracy_threshold, &self.prune_config());
        if let Some(m) = es.max_rounds {
            c.max_rounds = m;
        }
        c
    }

    pub fn early_stop_config(&self) -> EarlyStopConfig {
        let es = self.early_stop.clone().unwrap_or(EarlyStopSection {
            entropy_threshold: default_te(),
            accuracy_threshold: default_ta(),
            max_rounds: None,
        });
        self.early_stop_config_from(&es)
    }

    /// Master seeds: the main seed followed by any replicas.
    pub fn seeds(&self) -> Vec<u64> {
        let mut s = vec![self.seed];
        s.extend(self.replicas.iter().copied().filter(|&r| r != self.seed));
        s
    }
}

/// Sets `a.b.c = raw` in `table`; `raw` is parsed as a TOML value and falls
/// back to a plain string. Only keys holding scalars (or absent keys inside
/// existing tables) may be overridden.
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad(key, "malformed key"));
    }
    let value = parse_scalar(raw);
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| bad(key, format!("{part} is not a table")))?;
    }
    let last = parts[parts.len() - 1];
    if let Some(existing) = cur.get(last) {
        if existing.is_table() {
            return Err(bad(key, "cannot override a whole table"));
        }
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Splits `--a.b=value` / `--a.b value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(LabError::Config(format!("unexpected argument {arg:?}")));
        };
        match flag.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| bad(flag, "missing value"))?;
                out.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}
