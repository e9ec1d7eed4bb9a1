//! Activation-state entropy of ReLU layers.
//!
//! Each neuron is observed as "on" (activation > 0) or "off" (≤ 0). With `p`
//! the empirical on-frequency, a neuron contributes `−p·log p − (1−p)·log(1−p)`
//! and a layer reports the mean over its neurons.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBase {
    #[default]
    Bits,
    Nats,
}

/// What counts as one neuron in a convolutional ReLU output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvNeuron {
    /// One output channel, observed at every spatial position.
    #[default]
    Channel,
    /// Every (channel, y, x) position is its own neuron.
    Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntropyConfig {
    pub base: LogBase,
    pub conv_neuron: ConvNeuron,
    pub batch_size: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            base: LogBase::Bits,
            conv_neuron: ConvNeuron::Channel,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub per_layer: Vec<(String, f64)>,
    pub average: f64,
    pub sample_count: usize,
}

/// 1 where the activation is strictly positive, else 0.
pub fn neuron_states<T: Scalar>(activations: &Tensor<T>) -> Vec<u8> {
    activations.data().iter().map(|&v| u8::from(v > T::ZERO)).collect()
}

/// Entropy of a two-state variable with `P(on) = p`; `0·log 0 = 0`.
pub fn binary_entropy(p: f64, base: LogBase) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * libm::log(q) };
    let h = term(p) + term(1.0 - p);
    match base {
        LogBase::Bits => h / core::f64::consts::LN_2,
        LogBase::Nats => h,
    }
}

/// Mean per-neuron entropy from on-counts over `observations` trials each.
pub fn layer_entropy(on_counts: &[u64], observations: u64, base: LogBase) -> Result<f64> {
    if observations == 0 || on_counts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = on_counts
        .iter()
        .map(|&c| binary_entropy(c as f64 / observations as f64, base))
        .sum();
    Ok(total / on_counts.len() as f64)
}

/// Per-layer on-counts accumulated over batches.
#[derive(Debug, Clone)]
struct LayerCounter {
    on: Vec<u64>,
    observations: u64,
}

fn accumulate<T: Scalar>(counter: &mut Option<LayerCounter>, act: &Tensor<T>, mode: ConvNeuron) {
    let s = act.shape();
    let batch = s[0];
    let (neurons, stride, per_neuron) = match (s.len(), mode) {
        // [B, C, H, W] pooled over space
        (4, ConvNeuron::Channel) => (s[1], s[2] * s[3], s[2] * s[3]),
        _ => (s[1..].iter().product(), 1, 1),
    };
    let c = counter.get_or_insert_with(|| LayerCounter {
        on: vec![0; neurons],
        observations: 0,
    });
    let data = act.data();
    let sample = neurons * stride;
    for b in 0..batch {
        let row = &data[b * sample..(b + 1) * sample];
        for (n, chunk) in row.chunks(stride).enumerate() {
            c.on[n] += chunk.iter().filter(|&&v| v > T::ZERO).count() as u64;
        }
    }
    c.observations += (batch * per_neuron) as u64;
}

/// Entropy of every ReLU layer over `data` in eval mode, and their mean.
/// `data` must already carry the model's input preprocessing.
pub fn model_entropy<T: Scalar>(model: &Model<T>, data: &Dataset, cfg: &EntropyConfig) -> Result<EntropyReport> {
    let names: Vec<String> = model.relu_layer_names().into_iter().map(String::from).collect();
    if names.is_empty() {
        return Err(Error::NoReluLayers);
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counters: Vec<Option<LayerCounter>> = vec![None; names.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let (images, _) = data.batch(chunk);
        let mut tape = Tape::new();
        let fwd = model.forward_eval(&mut tape, images.cast())?;
        for (counter, &v) in counters.iter_mut().zip(&fwd.relu_outputs) {
            accumulate(counter, tape.value(v), cfg.conv_neuron);
        }
    }
    let mut per_layer = Vec::with_capacity(names.len());
    for (name, c) in names.into_iter().zip(counters) {
        let c = c.expect("every layer saw at least one batch");
        per_layer.push((name, layer_entropy(&c.on, c.observations, cfg.base)?));
    }
    let average = per_layer.iter().map(|(_, h)| h).sum::<f64>() / per_layer.len() as f64;
    Ok(EntropyReport {
        per_layer,
        average,
        sample_count: data.len(),
    })
}
