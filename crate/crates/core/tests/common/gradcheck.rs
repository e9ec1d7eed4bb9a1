//! Central finite-difference checks of tape gradients in f64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdd_core::layers::{apply_layer, BnStats, LayerSpec, LayerVars, Mode};
use sdd_core::tape::{Tape, Var};
use sdd_core::tensor::Tensor;

pub const STEP: f64 = 1e-4;

/// Elementwise relative error; the floor keeps entries whose true gradient is
/// exactly zero from dividing by nothing.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct Case {
    pub label: String,
    pub layer: LayerSpec,
    /// Includes the batch axis.
    pub input_shape: Vec<usize>,
    pub mode: Mode,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Inputs whose entries are pairwise at least 0.05 apart and away from zero,
/// so ReLU and max-pool stay differentiable under the ±h probe.
fn spread_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

struct Setup {
    x: Tensor<f64>,
    weight: Option<Tensor<f64>>,
    bias: Option<Tensor<f64>>,
    stats: Option<BnStats<f64>>,
    readout: Tensor<f64>,
    labels: Vec<usize>,
}

const READOUT: usize = 3;

fn build(case: &Case, rng: &mut ChaCha8Rng) -> Setup {
    let x = match case.layer {
        LayerSpec::Relu | LayerSpec::MaxPool2x2 => spread_tensor(&case.input_shape, rng),
        _ => random_tensor(&case.input_shape, rng),
    };
    let (weight, bias) = match case.layer.param_shapes() {
        Some((w, b)) => {
            let mut bias = random_tensor(&b, rng);
            if matches!(case.layer, LayerSpec::BatchNorm2d { .. }) {
                // gamma around 1
                let gamma = random_tensor(&w, rng).map(|v| 1.0 + 0.5 * v);
                bias = bias.map(|v| 0.5 * v);
                (Some(gamma), Some(bias))
            } else {
                (Some(random_tensor(&w, rng)), Some(bias))
            }
        }
        None => (None, None),
    };
    let stats = match case.layer {
        LayerSpec::BatchNorm2d { channels } => {
            let mut s = BnStats::new(channels);
            if case.mode == Mode::Eval {
                s.mean = (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect();
                s.var = (0..channels).map(|_| rng.random_range(0.5..2.0)).collect();
                s.initialized = true;
            }
            Some(s)
        }
        _ => None,
    };
    let out_shape = case.layer.output_shape(&case.input_shape[1..]).unwrap();
    let features: usize = out_shape.iter().product();
    let n = case.input_shape[0];
    Setup {
        x,
        weight,
        bias,
        stats,
        readout: random_tensor(&[READOUT, features], rng),
        labels: (0..n).map(|_| rng.random_range(0..READOUT)).collect(),
    }
}

/// Loss = cross-entropy of a fixed linear readout of the flattened layer output.
fn loss_and_vars(case: &Case, s: &Setup, tape: &mut Tape<f64>) -> (Var, Vec<Var>) {
    let x = tape.input(s.x.clone());
    let w = s.weight.clone().map(|w| tape.input(w));
    let b = s.bias.clone().map(|b| tape.input(b));
    let mut stats = s.stats.clone();
    let y = apply_layer(
        tape,
        &case.layer,
        LayerVars { weight: w, bias: b },
        stats.as_mut(),
        0,
        x,
        case.mode,
    )
    .unwrap();
    let n = case.input_shape[0];
    let features = tape.value(y).numel() / n;
    let flat = tape.reshape(y, &[n, features]).unwrap();
    let rw = tape.input(s.readout.clone());
    let rb = tape.input(Tensor::zeros([READOUT]));
    let logits = tape.dense(flat, rw, rb).unwrap();
    let loss = tape.cross_entropy(logits, &s.labels).unwrap();
    let mut vars = vec![x];
    vars.extend(w);
    vars.extend(b);
    (loss, vars)
}

fn eval_loss(case: &Case, s: &Setup) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = loss_and_vars(case, s, &mut tape);
    tape.value(loss).item()
}

fn slot(s: &mut Setup, k: usize) -> &mut Tensor<f64> {
    match k {
        0 => &mut s.x,
        1 => s.weight.as_mut().unwrap(),
        _ => s.bias.as_mut().unwrap(),
    }
}

/// Largest relative error over the input and the layer's parameters.
pub fn check_layer(case: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = build(case, &mut rng);
    let mut tape = Tape::new();
    let (loss, vars) = loss_and_vars(case, &s, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).unwrap().data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = slot(&mut s, k).data()[i];
            slot(&mut s, k).data_mut()[i] = orig + STEP;
            let up = eval_loss(case, &s);
            slot(&mut s, k).data_mut()[i] = orig - STEP;
            let down = eval_loss(case, &s);
            slot(&mut s, k).data_mut()[i] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Largest relative error of the distillation loss gradient with respect to
/// the student logits.
pub fn check_kd(batch: usize, classes: usize, alpha: f64, tau: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = random_tensor(&[batch, classes], &mut rng).map(|v| 3.0 * v);
    let teacher = random_tensor(&[batch, classes], &mut rng).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let eval = |s: &Tensor<f64>| {
        let mut tape = Tape::new();
        let x = tape.input(s.clone());
        let l = tape.distill(x, &teacher, &labels, alpha, tau).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let x = tape.input(student.clone());
    let l = tape.distill(x, &teacher, &labels, alpha, tau).unwrap();
    let analytic = tape.backward(l).unwrap().get(x).unwrap().data().to_vec();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = student.data()[i];
        student.data_mut()[i] = orig + STEP;
        let up = eval(&student);
        student.data_mut()[i] = orig - STEP;
        let down = eval(&student);
        student.data_mut()[i] = orig;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
    }
    worst
}

/// The fixed suite: every layer kind in several random shapes.
pub fn layer_cases() -> Vec<Case> {
    let mut v = Vec::new();
    let mut push = |layer: LayerSpec, shape: &[usize], mode: Mode| {
        v.push(Case {
            label: format!("{} {:?} {:?}", layer.name(), shape, mode),
            layer,
            input_shape: shape.to_vec(),
            mode,
        })
    };
    for (n, i, o) in [(1, 3, 2), (4, 5, 7), (3, 8, 1), (2, 1, 6)] {
        push(LayerSpec::Dense { in_features: i, out_features: o }, &[n, i], Mode::Train);
    }
    for (n, ci, co, h, w) in [(1, 1, 2, 3, 3), (2, 2, 3, 4, 5), (2, 3, 2, 1, 4), (1, 2, 2, 6, 2)] {
        push(LayerSpec::Conv2d { in_channels: ci, out_channels: co }, &[n, ci, h, w], Mode::Train);
    }
    for shape in [&[3, 4][..], &[2, 2, 3, 3], &[1, 3, 2, 5]] {
        push(LayerSpec::Relu, shape, Mode::Train);
    }
    for (n, c, h, w) in [(4, 2, 3, 3), (3, 3, 2, 2), (2, 1, 4, 5)] {
        push(LayerSpec::BatchNorm2d { channels: c }, &[n, c, h, w], Mode::Train);
    }
    for (n, c, h, w) in [(2, 2, 3, 3), (1, 3, 2, 4)] {
        push(LayerSpec::BatchNorm2d { channels: c }, &[n, c, h, w], Mode::Eval);
    }
    for (n, c, h, w) in [(1, 1, 4, 4), (2, 2, 5, 6), (1, 3, 3, 2)] {
        push(LayerSpec::MaxPool2x2, &[n, c, h, w], Mode::Train);
    }
    for (n, c, h, w, oh, ow) in [(1, 2, 4, 4, 2, 2), (2, 1, 5, 3, 7, 7), (1, 3, 6, 6, 4, 3), (2, 2, 3, 3, 1, 1)] {
        push(LayerSpec::AdaptiveAvgPool { out_h: oh, out_w: ow }, &[n, c, h, w], Mode::Train);
    }
    for shape in [&[2, 3, 2, 2][..], &[1, 4, 1, 3]] {
        push(LayerSpec::Flatten, shape, Mode::Train);
    }
    v
}

/// (batch, classes, alpha, tau) combinations for the distillation check.
pub const KD_CASES: [(usize, usize, f64, f64); 5] =
    [(1, 2, 0.8, 10.0), (4, 3, 0.5, 2.0), (3, 10, 0.0, 1.0), (2, 5, 1.0, 4.0), (5, 4, 0.8, 0.5)];
