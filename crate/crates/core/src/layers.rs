//! Layer kinds of the model family and their numeric kernels.
//!
//! Kernels operate on flat row-major slices; the tape in [`crate::tape`]
//! wires them into forward/backward passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Epsilon added to the batch variance before normalizing.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The closed set of layer kinds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// `x·Wᵀ + b` on a `batch×in` input.
    Dense { in_features: usize, out_features: usize },
    /// 3×3 kernels, stride 1, padding 1.
    Conv2d { in_channels: usize, out_channels: usize },
    Relu,
    BatchNorm2d { channels: usize },
    MaxPool2x2,
    /// Spatial mean pooling onto a fixed `out_h×out_w` grid.
    AdaptiveAvgPool { out_h: usize, out_w: usize },
    /// Collapses every axis but the batch axis.
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Shapes of the (weight, bias) pair owned by the layer, if any.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => Some((vec![out_channels, in_channels, 3, 3], vec![out_channels])),
            LayerSpec::BatchNorm2d { channels } => Some((vec![channels], vec![channels])),
            _ => None,
        }
    }

    /// Output shape of one sample (batch axis excluded).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::shape(self.name(), &[], input);
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(Error::shape("dense", &[in_features], input));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => match input {
                [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                _ => Err(bad()),
            },
            LayerSpec::BatchNorm2d { channels } => match input {
                [c, _, _] if *c == channels => Ok(input.to_vec()),
                _ => Err(bad()),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(bad()),
            },
            LayerSpec::AdaptiveAvgPool { out_h, out_w } => match input {
                [c, _, _] => Ok(vec![*c, out_h, out_w]),
                _ => Err(bad()),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Forward multiply-add count for one sample, two FLOPs per MAC.
    /// Only dense and convolutional layers are counted.
    pub fn forward_flops(&self, input: &[usize]) -> u64 {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => 2 * (in_features * out_features) as u64,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => {
                let (h, w) = (input[1], input[2]);
                2 * (9 * in_channels * out_channels * h * w) as u64
            }
            _ => 0,
        }
    }
}

/// Per-channel running statistics of a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
            initialized: false,
        }
    }

    pub fn reset(&mut self) {
        let c = self.mean.len();
        *self = Self::new(c);
    }

    /// Folds a batch's statistics in; the first batch seeds them directly.
    pub fn update(&mut self, batch_mean: &[T], batch_var_unbiased: &[T]) {
        let m = T::from_f64(BN_MOMENTUM);
        for c in 0..self.mean.len() {
            if self.initialized {
                self.mean[c] = (T::ONE - m) * self.mean[c] + m * batch_mean[c];
                self.var[c] = (T::ONE - m) * self.var[c] + m * batch_var_unbiased[c];
            } else {
                self.mean[c] = batch_mean[c];
                self.var[c] = batch_var_unbiased[c];
            }
        }
        self.initialized = true;
    }
}

/// Parameter handles a layer consumes on the tape.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerVars {
    pub weight: Option<Var>,
    pub bias: Option<Var>,
}

/// Applies one layer to `x`. Batchnorm layers need `stats`; in train mode the
/// batch statistics are folded into them.
pub fn apply_layer<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &LayerSpec,
    vars: LayerVars,
    stats: Option<&mut BnStats<T>>,
    layer_index: usize,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let in_shape = tape.value(x).shape().to_vec();
    if in_shape.is_empty() {
        return Err(Error::shape(layer.name(), &[0], &in_shape));
    }
    layer.output_shape(&in_shape[1..])?;
    let need = |v: Option<Var>| v.ok_or_else(|| Error::invalid("layer", "missing parameter"));
    match *layer {
        LayerSpec::Dense { .. } => tape.dense(x, need(vars.weight)?, need(vars.bias)?),
        LayerSpec::Conv2d { .. } => tape.conv3x3(x, need(vars.weight)?, need(vars.bias)?),
        LayerSpec::Relu => Ok(tape.relu(x)),
        LayerSpec::BatchNorm2d { .. } => {
            let stats = stats.ok_or_else(|| Error::invalid("layer", "missing batchnorm statistics"))?;
            let (gamma, beta) = (need(vars.weight)?, need(vars.bias)?);
            match mode {
                Mode::Train => {
                    let (y, mean, var) = tape.batch_norm_train(x, gamma, beta)?;
                    stats.update(&mean, &var);
                    Ok(y)
                }
                Mode::Eval => {
                    if !stats.initialized {
                        return Err(Error::BatchNormUninitialized { layer: layer_index });
                    }
                    tape.batch_norm_eval(x, gamma, beta, &stats.mean, &stats.var)
                }
            }
        }
        LayerSpec::MaxPool2x2 => tape.max_pool2x2(x),
        LayerSpec::AdaptiveAvgPool { out_h, out_w } => tape.adaptive_avg_pool(x, out_h, out_w),
        LayerSpec::Flatten => {
            let n = in_shape[0];
            let rest: usize = in_shape[1..].iter().product();
            tape.reshape(x, &[n, rest])
        }
    }
}

// ---- kernels ----------------------------------------------------------

/// Unfolds one `c×h×w` image into a `(c·9)×(h·w)` patch matrix (padding 1).
pub(crate) fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &mut cols[((ch * 9) + ki * 3 + kj) * hw..][..hw];
                // output columns whose tap lands inside the image
                let (lo, hi) = (1usize.saturating_sub(kj), (w + 1 - kj).min(w));
                for oh in 0..h {
                    let ih = oh as isize + ki as isize - 1;
                    let out = &mut row[oh * w..(oh + 1) * w];
                    if ih < 0 || ih >= h as isize || lo >= hi {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    out[..lo].fill(T::ZERO);
                    out[hi..].fill(T::ZERO);
                    out[lo..hi].copy_from_slice(&src[lo + kj - 1..hi + kj - 1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &cols[((ch * 9) + ki * 3 + kj) * hw..][..hw];
                let (lo, hi) = (1usize.saturating_sub(kj), (w + 1 - kj).min(w));
                if lo >= hi {
                    continue;
                }
                for oh in 0..h {
                    let ih = oh as isize + ki as isize - 1;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w + lo + kj - 1..ih as usize * w + hi + kj - 1];
                    for (d, &g) in dst.iter_mut().zip(&row[oh * w + lo..oh * w + hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Window `[start, end)` of output cell `i` when pooling `len` cells onto `out` cells.
pub(crate) fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn output_shapes_follow_layer_semantics() {
        let conv = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 8,
        };
        assert_eq!(conv.output_shape(&[3, 32, 32]).unwrap(), vec![8, 32, 32]);
        assert!(conv.output_shape(&[4, 32, 32]).is_err());
        assert_eq!(LayerSpec::MaxPool2x2.output_shape(&[8, 7, 7]).unwrap(), vec![8, 3, 3]);
        let pool = LayerSpec::AdaptiveAvgPool { out_h: 7, out_w: 7 };
        assert_eq!(pool.output_shape(&[8, 2, 2]).unwrap(), vec![8, 7, 7]);
        assert_eq!(LayerSpec::Flatten.output_shape(&[8, 7, 7]).unwrap(), vec![392]);
    }

    #[test]
    fn adaptive_windows_cover_input() {
        // 5 -> 3 cells: [0,2) [1,4) [3,5)
        assert_eq!(adaptive_window(0, 5, 3), (0, 2));
        assert_eq!(adaptive_window(1, 5, 3), (1, 4));
        assert_eq!(adaptive_window(2, 5, 3), (3, 5));
        // upsampling 2 -> 7: cells straddling the middle average both inputs
        let windows: Vec<_> = (0..7).map(|i| adaptive_window(i, 2, 7)).collect();
        assert_eq!(windows, [(0, 1), (0, 1), (0, 1), (0, 2), (1, 2), (1, 2), (1, 2)]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_f64([1, 3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = apply_layer(&mut tape, &LayerSpec::Relu, LayerVars::default(), None, 0, x, Mode::Train).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dense_hand_product() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_f64([1, 2], &[1.0, 1.0]).unwrap());
        let w = tape.input(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.input(Tensor::zeros([2]));
        let layer = LayerSpec::Dense {
            in_features: 2,
            out_features: 2,
        };
        let vars = LayerVars {
            weight: Some(w),
            bias: Some(b),
        };
        let y = apply_layer(&mut tape, &layer, vars, None, 0, x, Mode::Eval).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_kernel_convolution_is_identity() {
        let (c, h, w) = (2, 5, 4);
        let img: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut kernel = vec![0.0f32; c * c * 9];
        for ch in 0..c {
            kernel[(ch * c + ch) * 9 + 4] = 1.0;
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::new([1, c, h, w], img.clone()).unwrap());
        let wv = tape.input(Tensor::new([c, c, 3, 3], kernel).unwrap());
        let b = tape.input(Tensor::zeros([c]));
        let layer = LayerSpec::Conv2d {
            in_channels: c,
            out_channels: c,
        };
        let vars = LayerVars {
            weight: Some(wv),
            bias: Some(b),
        };
        let y = apply_layer(&mut tape, &layer, vars, None, 0, x, Mode::Train).unwrap();
        assert_eq!(tape.value(y).data(), img.as_slice());
    }

    #[test]
    fn batchnorm_eval_requires_statistics() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros([2, 1, 2, 2]));
        let g = tape.input(Tensor::full([1], 1.0));
        let b = tape.input(Tensor::zeros([1]));
        let mut stats = BnStats::new(1);
        let vars = LayerVars {
            weight: Some(g),
            bias: Some(b),
        };
        let layer = LayerSpec::BatchNorm2d { channels: 1 };
        let err = apply_layer(&mut tape, &layer, vars, Some(&mut stats), 3, x, Mode::Eval).unwrap_err();
        assert_eq!(err, Error::BatchNormUninitialized { layer: 3 });
    }

    #[test]
    fn batchnorm_eval_is_repeatable() {
        let data: Vec<f32> = (0..16).map(|i| i as f32 * 0.5 - 3.0).collect();
        let layer = LayerSpec::BatchNorm2d { channels: 2 };
        let mut stats = BnStats::new(2);
        let run = |stats: &mut BnStats<f32>, mode| {
            let mut tape = Tape::<f32>::new();
            let x = tape.input(Tensor::new([2, 2, 2, 2], data.clone()).unwrap());
            let g = tape.input(Tensor::full([2], 1.5));
            let b = tape.input(Tensor::full([2], 0.25));
            let vars = LayerVars {
                weight: Some(g),
                bias: Some(b),
            };
            let y = apply_layer(&mut tape, &layer, vars, Some(stats), 0, x, mode).unwrap();
            tape.value(y).clone()
        };
        run(&mut stats, Mode::Train);
        let a = run(&mut stats, Mode::Eval);
        let b = run(&mut stats, Mode::Eval);
        assert_eq!(a, b);
    }

    #[test]
    fn flops_follow_layer_dimensions() {
        let dense = LayerSpec::Dense {
            in_features: 784,
            out_features: 10,
        };
        assert_eq!(dense.forward_flops(&[784]), 15_680);
        let conv = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 4,
        };
        assert_eq!(conv.forward_flops(&[3, 8, 8]), 2 * 9 * 3 * 4 * 64);
        assert_eq!(LayerSpec::Relu.forward_flops(&[10]), 0);
    }
}
