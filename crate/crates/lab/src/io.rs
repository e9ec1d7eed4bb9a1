//! File formats: IDX (optionally gzipped), checkpoints, CSV traces and JSON
//! summaries.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use sdd_core::checkpoint;
use sdd_core::data::{dataset_from_idx, Dataset};
use sdd_core::model::Model;
use sdd_core::pipeline::{best_index, label_phases, Phase, RunRecord};
use sdd_core::sparsify::MaskSet;

use crate::error::{LabError, Result};

pub const CSV_HEADER: [&str; 7] = [
    "round",
    "sparsity",
    "train_acc",
    "val_acc",
    "test_acc",
    "entropy_avg",
    "flops_cumulative",
];

/// Reads a file, inflating it when the name ends in `.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| LabError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| LabError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let img = read_maybe_gz(images)?;
    let lab = read_maybe_gz(labels)?;
    dataset_from_idx(&img, &lab, num_classes).map_err(|e| LabError::format(images, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, masks: &MaskSet) -> Result<()> {
    let bytes = checkpoint::save(model, masks).map_err(|e| LabError::format(path, e))?;
    write_file(path, &bytes)
}

/// Loads weights, masks and batch-norm statistics into a model of matching
/// architecture.
pub fn load_checkpoint(path: &Path, model: &mut Model<f32>) -> Result<MaskSet> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    checkpoint::load(model, &bytes).map_err(|e| LabError::format(path, e))
}

pub fn csv_string(records: &[RunRecord]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.round.to_string(),
            format!("{:.6}", r.sparsity),
            format!("{:.6}", r.train_acc),
            format!("{:.6}", r.val_acc),
            format!("{:.6}", r.test_acc),
            format!("{:.6}", r.entropy_avg),
            r.flops_cumulative.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn write_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    write_file(path, csv_string(records).as_bytes())
}

pub fn parse_csv(path: &Path, text: &str) -> Result<Vec<RunRecord>> {
    let mut rd = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| LabError::format(path, e))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(LabError::format(path, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (line, row) in rd.records().enumerate() {
        let row = row.map_err(|e| LabError::format(path, e))?;
        let bad = |col: &str| LabError::format(path, format!("row {}: bad {col}", line + 1));
        let f = |i: usize| -> Result<f64> { row[i].parse().map_err(|_| bad(CSV_HEADER[i])) };
        out.push(RunRecord {
            round: row[0].parse().map_err(|_| bad("round"))?,
            sparsity: f(1)?,
            train_acc: f(2)?,
            val_acc: f(3)?,
            test_acc: f(4)?,
            entropy_avg: f(5)?,
            flops_cumulative: row[6].parse().map_err(|_| bad("flops_cumulative"))?,
        });
    }
    Ok(out)
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_csv(path, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpans {
    pub light: Vec<usize>,
    pub critical: Vec<usize>,
    pub sweet: Vec<usize>,
    pub collapsed: Vec<usize>,
}

impl PhaseSpans {
    pub fn from_labels(records: &[RunRecord], labels: &[Phase]) -> Self {
        let mut s = Self {
            light: vec![],
            critical: vec![],
            sweet: vec![],
            collapsed: vec![],
        };
        for (r, p) in records.iter().zip(labels) {
            match p {
                Phase::Light => s.light.push(r.round),
                Phase::Critical => s.critical.push(r.round),
                Phase::Sweet => s.sweet.push(r.round),
                Phase::Collapsed => s.collapsed.push(r.round),
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_round: usize,
    pub best_val_acc: f64,
    pub best_test_acc: f64,
    pub sparsity_at_best: f64,
    pub flops_cumulative: u64,
    pub best_phase: String,
    pub phases: PhaseSpans,
}

/// Best round by validation accuracy (earliest on ties) and phase labels
/// computed from the validation trace.
pub fn summarize(records: &[RunRecord], margin: f64) -> Result<Summary> {
    let best = best_index(records.iter().map(|r| r.val_acc))
        .ok_or_else(|| LabError::Config("no records to summarise".into()))?;
    let val: Vec<f64> = records.iter().map(|r| r.val_acc).collect();
    let labels = label_phases(&val, margin)?;
    let r = &records[best];
    Ok(Summary {
        best_round: r.round,
        best_val_acc: r.val_acc,
        best_test_acc: r.test_acc,
        sparsity_at_best: r.sparsity,
        flops_cumulative: records.last().map_or(0, |l| l.flops_cumulative),
        best_phase: labels[best].name().to_string(),
        phases: PhaseSpans::from_labels(records, &labels),
    })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json(value).as_bytes())
}
