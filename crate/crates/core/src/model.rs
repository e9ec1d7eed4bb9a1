//! The VGG-like `(depth, width)` family, a small MLP, and the parameter
//! registry with per-parameter prunable flags.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{apply_layer, BnStats, LayerSpec, LayerVars, Mode};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Spatial size the adaptive pooling stage produces ahead of the classifier.
pub const VGG_POOL_OUT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub layer: usize,
    /// Convolutional and fully-connected weight matrices only.
    pub prunable: bool,
}

/// `δ` groups of two conv blocks, `2^(γ+j−1)` filters in group `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VggSpec {
    pub depth: usize,
    pub width_exp: u32,
    pub in_channels: usize,
    pub image_size: (usize, usize),
    pub num_classes: usize,
}

impl VggSpec {
    pub fn new(depth: usize, width_exp: u32, in_channels: usize, image_size: (usize, usize), num_classes: usize) -> Self {
        Self {
            depth,
            width_exp,
            in_channels,
            image_size,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.depth) {
            return Err(Error::invalid("depth", "must lie in [1, 5]"));
        }
        if self.width_exp < 3 {
            return Err(Error::invalid("width_exp", "must be at least 3"));
        }
        if self.width_exp + self.depth as u32 > 24 {
            return Err(Error::invalid("width_exp", "too large"));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::invalid("in_channels", "channels and classes must be positive"));
        }
        let (h, w) = self.image_size;
        let shrink = 1usize << (self.depth - 1);
        if h / shrink == 0 || w / shrink == 0 {
            return Err(Error::invalid("image_size", "too small for the requested depth"));
        }
        Ok(())
    }

    /// Filters of group `j` (1-indexed).
    pub fn group_width(&self, j: usize) -> usize {
        1usize << (self.width_exp as usize + j - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    layers: Vec<LayerSpec>,
    layer_names: Vec<String>,
    slots: Vec<Option<(usize, usize)>>,
    params: Vec<Param<T>>,
    bn: Vec<Option<BnStats<T>>>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

/// Handles produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Parameter leaves, in registry order.
    pub params: Vec<Var>,
    /// Outputs of every ReLU layer, in layer order.
    pub relu_outputs: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Assembles a model from named layers; parameters start at zero until
    /// [`Model::init`] is called.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<(String, LayerSpec)>, num_classes: usize) -> Result<Self> {
        let mut shape = input_shape.clone();
        let mut model = Self {
            layers: Vec::new(),
            layer_names: Vec::new(),
            slots: Vec::new(),
            params: Vec::new(),
            bn: Vec::new(),
            input_shape,
            num_classes,
        };
        for (li, (name, spec)) in layers.into_iter().enumerate() {
            shape = spec.output_shape(&shape)?;
            let slot = spec.param_shapes().map(|(ws, bs)| {
                let (wk, bk, prunable) = match spec {
                    LayerSpec::BatchNorm2d { .. } => (ParamKind::BnScale, ParamKind::BnShift, false),
                    _ => (ParamKind::Weight, ParamKind::Bias, true),
                };
                let w = model.params.len();
                model.params.push(Param {
                    name: format!("{name}.weight"),
                    value: Tensor::zeros(ws),
                    kind: wk,
                    layer: li,
                    prunable,
                });
                model.params.push(Param {
                    name: format!("{name}.bias"),
                    value: Tensor::zeros(bs),
                    kind: bk,
                    layer: li,
                    prunable: false,
                });
                (w, w + 1)
            });
            model.bn.push(match spec {
                LayerSpec::BatchNorm2d { channels } => Some(BnStats::new(channels)),
                _ => None,
            });
            model.slots.push(slot);
            model.layers.push(spec);
            model.layer_names.push(name);
        }
        if shape != [num_classes] {
            return Err(Error::shape("model output", &[num_classes], &shape));
        }
        Ok(model)
    }

    /// Fresh values for every parameter: weights `U(−1/√fan_in, 1/√fan_in)`,
    /// biases 0, batchnorm scale 1 and shift 0.
    pub fn sample_init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| {
                let shape = p.value.shape().to_vec();
                match p.kind {
                    ParamKind::Weight => {
                        let fan_in: usize = shape[1..].iter().product();
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        let data = (0..p.value.numel())
                            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                            .collect();
                        Tensor::new(shape, data).expect("shape matches")
                    }
                    ParamKind::Bias | ParamKind::BnShift => Tensor::zeros(shape),
                    ParamKind::BnScale => Tensor::full(shape, T::ONE),
                }
            })
            .collect()
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fresh = self.sample_init(rng);
        for (p, v) in self.params.iter_mut().zip(fresh) {
            p.value = v;
        }
        self.reset_bn_stats();
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn prunable_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.iter().enumerate().filter(|(_, p)| p.prunable).map(|(i, _)| i)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn bn_stats(&self) -> impl Iterator<Item = &BnStats<T>> {
        self.bn.iter().flatten()
    }

    pub fn bn_stats_mut(&mut self) -> impl Iterator<Item = &mut BnStats<T>> {
        self.bn.iter_mut().flatten()
    }

    /// Batchnorm running statistics paired with their layer names.
    pub fn bn_stats_named(&self) -> impl Iterator<Item = (&str, &BnStats<T>)> {
        self.layer_names
            .iter()
            .zip(&self.bn)
            .filter_map(|(n, s)| s.as_ref().map(|s| (n.as_str(), s)))
    }

    pub fn bn_stats_for_mut(&mut self, layer: &str) -> Option<&mut BnStats<T>> {
        let i = self.layer_names.iter().position(|n| n == layer)?;
        self.bn[i].as_mut()
    }

    pub fn reset_bn_stats(&mut self) {
        for s in self.bn.iter_mut().flatten() {
            s.reset();
        }
    }

    pub fn count_params(&self, prunable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !prunable_only || p.prunable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Forward FLOPs for one sample (dense and conv layers only).
    pub fn forward_flops_per_sample(&self) -> u64 {
        let mut shape = self.input_shape.clone();
        let mut total = 0;
        for layer in &self.layers {
            total += layer.forward_flops(&shape);
            shape = layer.output_shape(&shape).expect("validated at construction");
        }
        total
    }

    pub fn relu_layer_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .zip(&self.layer_names)
            .filter(|(l, _)| matches!(l, LayerSpec::Relu))
            .map(|(_, n)| n.as_str())
            .collect()
    }

    fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if batch.len() != self.input_shape.len() + 1 || batch[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape("model input", &expected, batch));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. Train mode folds batch statistics
    /// into the batchnorm running estimates.
    pub fn forward(&mut self, tape: &mut Tape<T>, batch: Tensor<T>, mode: Mode) -> Result<Forward> {
        let mut bn = core::mem::take(&mut self.bn);
        let out = self.forward_with(&mut bn, tape, batch, mode);
        self.bn = bn;
        out
    }

    /// Eval-mode logits without touching any state.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward_eval(&mut tape, batch.clone())?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode forward pass recorded on `tape`.
    pub fn forward_eval(&self, tape: &mut Tape<T>, batch: Tensor<T>) -> Result<Forward> {
        let mut bn = self.bn.clone();
        self.forward_with(&mut bn, tape, batch, Mode::Eval)
    }

    fn forward_with(
        &self,
        bn: &mut [Option<BnStats<T>>],
        tape: &mut Tape<T>,
        batch: Tensor<T>,
        mode: Mode,
    ) -> Result<Forward> {
        self.check_batch(batch.shape())?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.input(p.value.clone())).collect();
        let mut x = tape.input(batch);
        let mut relu_outputs = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let vars = match self.slots[li] {
                Some((w, b)) => LayerVars {
                    weight: Some(params[w]),
                    bias: Some(params[b]),
                },
                None => LayerVars::default(),
            };
            x = apply_layer(tape, layer, vars, bn[li].as_mut(), li, x, mode)?;
            if matches!(layer, LayerSpec::Relu) {
                relu_outputs.push(x);
            }
        }
        Ok(Forward {
            logits: x,
            params,
            relu_outputs,
        })
    }

    pub fn set_param_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape("parameters", &[self.params.len()], &[values.len()]));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("parameter", p.value.shape(), v.shape()));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            layers: self.layers.clone(),
            layer_names: self.layer_names.clone(),
            slots: self.slots.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    layer: p.layer,
                    prunable: p.prunable,
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|s| {
                    s.as_ref().map(|s| BnStats {
                        mean: s.mean.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                        var: s.var.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                        initialized: s.initialized,
                    })
                })
                .collect(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Layer sequence of the VGG-like family; the final group has no trailing
/// max-pool ahead of the adaptive pooling stage.
pub fn vgg_layers(spec: &VggSpec) -> Result<Vec<(String, LayerSpec)>> {
    spec.validate()?;
    let mut layers = Vec::new();
    let mut channels = spec.in_channels;
    for j in 1..=spec.depth {
        let width = spec.group_width(j);
        for blk in 1..=2 {
            layers.push((
                format!("group{j}.conv{blk}"),
                LayerSpec::Conv2d {
                    in_channels: channels,
                    out_channels: width,
                },
            ));
            layers.push((format!("group{j}.relu{blk}"), LayerSpec::Relu));
            layers.push((format!("group{j}.bn{blk}"), LayerSpec::BatchNorm2d { channels: width }));
            channels = width;
        }
        if j < spec.depth {
            layers.push((format!("group{j}.pool"), LayerSpec::MaxPool2x2));
        }
    }
    layers.push((
        "avgpool".into(),
        LayerSpec::AdaptiveAvgPool {
            out_h: VGG_POOL_OUT,
            out_w: VGG_POOL_OUT,
        },
    ));
    layers.push(("flatten".into(), LayerSpec::Flatten));
    layers.push((
        "classifier".into(),
        LayerSpec::Dense {
            in_features: channels * VGG_POOL_OUT * VGG_POOL_OUT,
            out_features: spec.num_classes,
        },
    ));
    Ok(layers)
}

pub fn build_vgg<T: Scalar, R: Rng + ?Sized>(spec: &VggSpec, rng: &mut R) -> Result<Model<T>> {
    let layers = vgg_layers(spec)?;
    let (h, w) = spec.image_size;
    let mut model = Model::from_layers(vec![spec.in_channels, h, w], layers, spec.num_classes)?;
    model.init(rng);
    Ok(model)
}

/// Flatten, then `dense → relu` per hidden width, then a dense classifier.
pub fn mlp_layers(input_dim: usize, widths: &[usize], num_classes: usize) -> Result<Vec<(String, LayerSpec)>> {
    if widths.is_empty() {
        return Err(Error::invalid("widths", "at least one hidden layer is required"));
    }
    if input_dim == 0 || num_classes == 0 || widths.contains(&0) {
        return Err(Error::invalid("widths", "all widths must be at least 1"));
    }
    let mut layers = vec![(String::from("flatten"), LayerSpec::Flatten)];
    let mut prev = input_dim;
    for (i, &w) in widths.iter().enumerate() {
        layers.push((
            format!("hidden{}", i + 1),
            LayerSpec::Dense {
                in_features: prev,
                out_features: w,
            },
        ));
        layers.push((format!("relu{}", i + 1), LayerSpec::Relu));
        prev = w;
    }
    layers.push((
        "classifier".into(),
        LayerSpec::Dense {
            in_features: prev,
            out_features: num_classes,
        },
    ));
    Ok(layers)
}

/// `input_shape` is the per-sample shape; it is flattened on entry.
pub fn build_mlp<T: Scalar, R: Rng + ?Sized>(
    input_shape: &[usize],
    widths: &[usize],
    num_classes: usize,
    rng: &mut R,
) -> Result<Model<T>> {
    let input_dim = input_shape.iter().product();
    let layers = mlp_layers(input_dim, widths, num_classes)?;
    let mut model = Model::from_layers(input_shape.to_vec(), layers, num_classes)?;
    model.init(rng);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn mlp_hand_counts() {
        let m: Model = build_mlp(&[2], &[4], 2, &mut rng()).unwrap();
        assert_eq!(m.count_params(false), 22);
        assert_eq!(m.count_params(true), 2 * 4 + 4 * 2);
        let m: Model = build_mlp(&[784], &[8, 8], 10, &mut rng()).unwrap();
        assert_eq!(m.count_params(false), 6_442);
        assert!(build_mlp::<f32, _>(&[784], &[], 10, &mut rng()).is_err());
    }

    #[test]
    fn vgg_smallest_prunable_count_by_hand() {
        // δ=1, γ=3: conv 3→8, conv 8→8, classifier 8·49→10
        let spec = VggSpec::new(1, 3, 3, (32, 32), 10);
        let m: Model = build_vgg(&spec, &mut rng()).unwrap();
        let weights = 3 * 8 * 9 + 8 * 8 * 9 + 8 * 49 * 10;
        let biases = 8 + 8 + 10;
        let bn = 2 * (8 + 8);
        assert_eq!(m.count_params(true), weights);
        assert_eq!(m.count_params(false), weights + biases + bn);
    }

    #[test]
    fn vgg_rejects_out_of_range_spec() {
        for (d, g) in [(0, 5), (6, 5), (1, 2)] {
            let spec = VggSpec::new(d, g, 3, (32, 32), 10);
            assert!(build_vgg::<f32, _>(&spec, &mut rng()).is_err());
        }
    }

    #[test]
    fn vgg_structure_per_depth() {
        for depth in 1..=5 {
            let spec = VggSpec::new(depth, 4, 3, (32, 32), 10);
            let layers = vgg_layers(&spec).unwrap();
            let convs: Vec<usize> = layers
                .iter()
                .filter_map(|(_, l)| match l {
                    LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                    _ => None,
                })
                .collect();
            let expected: Vec<usize> = (1..=depth).flat_map(|j| [1 << (3 + j), 1 << (3 + j)]).collect();
            assert_eq!(convs, expected);
            let pools = layers.iter().filter(|(_, l)| *l == LayerSpec::MaxPool2x2).count();
            assert_eq!(pools, depth - 1);
            let tail: Vec<&str> = layers[layers.len() - 3..].iter().map(|(_, l)| l.name()).collect();
            assert_eq!(tail, ["adaptive_avg_pool", "flatten", "dense"]);
        }
    }

    #[test]
    fn only_conv_and_dense_weights_are_prunable() {
        let spec = VggSpec::new(2, 3, 3, (16, 16), 10);
        let m: Model = build_vgg(&spec, &mut rng()).unwrap();
        for p in m.params() {
            assert_eq!(p.prunable, p.kind == ParamKind::Weight, "{}", p.name);
            if p.prunable {
                assert!(matches!(m.layers()[p.layer], LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }));
            }
        }
    }

    #[test]
    fn zero_classifier_gives_equal_logits() {
        let mut m: Model = build_mlp(&[5], &[6], 4, &mut rng()).unwrap();
        let idx = m.param_index("classifier.weight").unwrap();
        m.params_mut()[idx].value = Tensor::zeros([4, 6]);
        let batch = Tensor::from_f64([2, 5], &[0.1, 0.2, 0.3, 0.4, 0.5, -1., -2., 3., 4., 5.]).unwrap();
        let logits = m.predict(&batch).unwrap();
        for row in logits.data().chunks(4) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = VggSpec::new(1, 3, 1, (8, 8), 3);
        let mut m: Model = build_vgg(&spec, &mut rng()).unwrap();
        let batch = Tensor::new([2, 1, 8, 8], (0..128).map(|i| (i as f32 * 0.1).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        m.forward(&mut tape, batch.clone(), Mode::Train).unwrap();
        let a = m.predict(&batch).unwrap();
        let b = m.predict(&batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m: Model = build_mlp(&[5], &[6], 4, &mut rng()).unwrap();
        assert!(matches!(m.predict(&Tensor::zeros([2, 4])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_dense_model_matches_layer_example() {
        let layers = vec![(
            String::from("fc"),
            LayerSpec::Dense {
                in_features: 2,
                out_features: 2,
            },
        )];
        let mut m: Model = Model::from_layers(vec![2], layers, 2).unwrap();
        m.params_mut()[0].value = Tensor::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap();
        let out = m.predict(&Tensor::from_f64([1, 2], &[1., 1.]).unwrap()).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }
}
