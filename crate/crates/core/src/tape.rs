//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward sweep. `backward` walks the tape in reverse and
//! returns gradients for every node that the loss depends on.

use alloc::vec;
use alloc::vec::Vec;

use crate::distill;
use crate::error::{Error, Result};
use crate::layers::{adaptive_window, col2im_add, im2col, BN_EPS};
use crate::loss;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Dense { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, w: Var, b: Var },
    Relu { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool { x: Var },
    Reshape { x: Var },
    Sum { x: Var },
    HalfSquaredNorm { x: Var },
    CrossEntropy { logits: Var, grad: Vec<T> },
    Distill { logits: Var, grad: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, &[0, 0, 0, 0], shape)),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (input or parameter).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (batch, inf) = match *xs {
            [n, f] => (n, f),
            _ => return Err(Error::shape("dense", &[0, 0], xs)),
        };
        let outf = ws[0];
        if ws != [outf, inf] || bs != [outf] {
            return Err(Error::shape("dense", &[outf, inf], ws));
        }
        let mut out = vec![T::ZERO; batch * outf];
        let bias = self.value(b).data();
        for row in out.chunks_mut(outf) {
            row.copy_from_slice(bias);
        }
        T::gemm(
            batch,
            inf,
            outf,
            T::ONE,
            self.value(x).data(),
            (inf as isize, 1),
            self.value(w).data(),
            (1, inf as isize),
            T::ONE,
            &mut out,
        );
        let value = Tensor::new([batch, outf], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x).shape(), "conv2d")?;
        let ws = self.value(w).shape();
        let f = ws[0];
        if ws != [f, c, 3, 3] || self.value(b).shape() != [f] {
            return Err(Error::shape("conv2d", &[f, c, 3, 3], ws));
        }
        let hw = h * wd;
        let k = c * 9;
        let mut cols = vec![T::ZERO; k * hw];
        let mut out = vec![T::ZERO; n * f * hw];
        let (xd, wdat, bdat) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for s in 0..n {
            im2col(&xd[s * c * hw..(s + 1) * c * hw], c, h, wd, &mut cols);
            let o = &mut out[s * f * hw..(s + 1) * f * hw];
            for (ch, plane) in o.chunks_mut(hw).enumerate() {
                plane.fill(bdat[ch]);
            }
            T::gemm(f, k, hw, T::ONE, wdat, (k as isize, 1), &cols, (hw as isize, 1), T::ONE, o);
        }
        let value = Tensor::new([n, f, h, wd], out)?;
        Ok(self.push(value, Op::Conv3x3 { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so divergence stays visible downstream
        let value = self.value(x).map(|v| if v <= T::ZERO { T::ZERO } else { v });
        self.push(value, Op::Relu { x })
    }

    /// Normalizes with the batch statistics. Also returns the batch mean and
    /// the unbiased batch variance for the running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "batchnorm2d")?;
        let hw = h * w;
        let m = n * hw;
        let xd = self.value(x).data();
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        for ch in 0..c {
            let mut s = T::ZERO;
            for smp in 0..n {
                s += xd[(smp * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let mu = s / T::from_usize(m);
            let mut v = T::ZERO;
            for smp in 0..n {
                for &e in &xd[(smp * c + ch) * hw..][..hw] {
                    v += (e - mu) * (e - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / T::from_usize(m);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + T::from_f64(BN_EPS)).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let unbiased = if m > 1 {
            var.iter().map(|&v| v * T::from_usize(m) / T::from_usize(m - 1)).collect()
        } else {
            var.clone()
        };
        let node = self.push(y, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std });
        Ok((node, mean, unbiased))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + T::from_f64(BN_EPS)).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std)?;
        Ok(self.push(y, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> Result<(Tensor<T>, Vec<T>)> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, h, w) = dims4(&shape, "batchnorm2d")?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c || mean.len() != c {
            return Err(Error::shape("batchnorm2d", &[c], &[g.len()]));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let mut xhat = vec![T::ZERO; xd.len()];
        let mut y = vec![T::ZERO; xd.len()];
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    y[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        Ok((Tensor::new(shape, y)?, xhat))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "maxpool2x2")?;
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "adaptive_avg_pool")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("adaptive_avg_pool", "output extent must be positive"));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for i in 0..out_h {
                let (h0, h1) = adaptive_window(i, h, out_h);
                for j in 0..out_w {
                    let (w0, w1) = adaptive_window(j, w, out_w);
                    let mut s = T::ZERO;
                    for r in h0..h1 {
                        s += src[r * w + w0..r * w + w1].iter().copied().sum::<T>();
                    }
                    out[plane * out_h * out_w + i * out_w + j] = s / T::from_usize((h1 - h0) * (w1 - w0));
                }
            }
        }
        let value = Tensor::new([n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// `0.5·‖x‖²`
    pub fn half_squared_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<T>() * T::from_f64(0.5);
        self.push(Tensor::scalar(s), Op::HalfSquaredNorm { x })
    }

    /// Mean cross-entropy of `batch×classes` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, grad) = loss::cross_entropy_with_grad(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(value), Op::CrossEntropy { logits, grad }))
    }

    /// Knowledge-distillation objective against fixed teacher logits.
    pub fn distill(&mut self, logits: Var, teacher: &Tensor<T>, labels: &[usize], alpha: T, tau: T) -> Result<Var> {
        let (value, grad) = distill::kd_loss_with_grad(self.value(logits), teacher, labels, alpha, tau)?;
        Ok(self.push(Tensor::scalar(value), Op::Distill { logits, grad }))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.nodes.get(loss.0).ok_or(Error::NotRecorded)?;
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape().to_vec(), T::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input) {
                grads[idx] = Some(gy);
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Dense { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (batch, inf) = (xv.shape()[0], xv.shape()[1]);
                    let outf = wv.shape()[0];
                    let g = gy.data();
                    let mut dx = vec![T::ZERO; batch * inf];
                    T::gemm(batch, outf, inf, T::ONE, g, (outf as isize, 1), wv.data(), (inf as isize, 1), T::ZERO, &mut dx);
                    let mut dw = vec![T::ZERO; outf * inf];
                    T::gemm(outf, batch, inf, T::ONE, g, (1, outf as isize), xv.data(), (inf as isize, 1), T::ZERO, &mut dw);
                    let mut db = vec![T::ZERO; outf];
                    for row in g.chunks(outf) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?)?;
                    accumulate(&mut grads, *b, Tensor::new([outf], db)?)?;
                }
                Op::Conv3x3 { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, c, h, wd) = dims4(xv.shape(), "conv2d")?;
                    let f = wv.shape()[0];
                    let hw = h * wd;
                    let k = c * 9;
                    let g = gy.data();
                    let mut cols = vec![T::ZERO; k * hw];
                    let mut dcols = vec![T::ZERO; k * hw];
                    let mut dx = vec![T::ZERO; xv.numel()];
                    let mut dw = vec![T::ZERO; wv.numel()];
                    let mut db = vec![T::ZERO; f];
                    for s in 0..n {
                        let gs = &g[s * f * hw..(s + 1) * f * hw];
                        im2col(&xv.data()[s * c * hw..(s + 1) * c * hw], c, h, wd, &mut cols);
                        // dW += dY · colsᵀ
                        T::gemm(f, hw, k, T::ONE, gs, (hw as isize, 1), &cols, (1, hw as isize), T::ONE, &mut dw);
                        // dcols = Wᵀ · dY
                        T::gemm(k, f, hw, T::ONE, wv.data(), (1, k as isize), gs, (hw as isize, 1), T::ZERO, &mut dcols);
                        col2im_add(&dcols, c, h, wd, &mut dx[s * c * hw..(s + 1) * c * hw]);
                        for (ch, plane) in gs.chunks(hw).enumerate() {
                            db[ch] += plane.iter().copied().sum::<T>();
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?)?;
                    accumulate(&mut grads, *b, Tensor::new([f], db)?)?;
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (n, c, h, w) = dims4(&shape, "batchnorm2d")?;
                    let hw = h * w;
                    let m = T::from_usize(n * hw);
                    let g = gy.data();
                    let gam = self.value(*gamma).data();
                    let (dgamma, dbeta) = bn_affine_grads(g, xhat, n, c, hw);
                    let mut dx = vec![T::ZERO; g.len()];
                    for ch in 0..c {
                        // dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                        let scale = gam[ch] * inv_std[ch] / m;
                        for smp in 0..n {
                            let off = (smp * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = scale * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx)?)?;
                    accumulate(&mut grads, *gamma, Tensor::new([c], dgamma)?)?;
                    accumulate(&mut grads, *beta, Tensor::new([c], dbeta)?)?;
                }
                Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (n, c, h, w) = dims4(&shape, "batchnorm2d")?;
                    let hw = h * w;
                    let g = gy.data();
                    let gam = self.value(*gamma).data();
                    let (dgamma, dbeta) = bn_affine_grads(g, xhat, n, c, hw);
                    let mut dx = vec![T::ZERO; g.len()];
                    for smp in 0..n {
                        for ch in 0..c {
                            let off = (smp * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = g[i] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx)?)?;
                    accumulate(&mut grads, *gamma, Tensor::new([c], dgamma)?)?;
                    accumulate(&mut grads, *beta, Tensor::new([c], dbeta)?)?;
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = vec![T::ZERO; xv.numel()];
                    for (&src, &g) in argmax.iter().zip(gy.data()) {
                        dx[src] += g;
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::AdaptiveAvgPool { x } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = dims4(xv.shape(), "adaptive_avg_pool")?;
                    let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                    let g = gy.data();
                    let mut dx = vec![T::ZERO; xv.numel()];
                    for plane in 0..n * c {
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for i in 0..oh {
                            let (h0, h1) = adaptive_window(i, h, oh);
                            for j in 0..ow {
                                let (w0, w1) = adaptive_window(j, w, ow);
                                let share = g[plane * oh * ow + i * ow + j] / T::from_usize((h1 - h0) * (w1 - w0));
                                for r in h0..h1 {
                                    for d in &mut dst[r * w + w0..r * w + w1] {
                                        *d += share;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, gy.reshape(shape)?)?;
                }
                Op::Sum { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(shape, gy.item()))?;
                }
                Op::HalfSquaredNorm { x } => {
                    let s = gy.item();
                    let dx = self.value(*x).map(|v| v * s);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::CrossEntropy { logits, grad } | Op::Distill { logits, grad } => {
                    let s = gy.item();
                    let shape = self.value(*logits).shape().to_vec();
                    let dx = grad.iter().map(|&v| v * s).collect();
                    accumulate(&mut grads, *logits, Tensor::new(shape, dx)?)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn bn_affine_grads<T: Scalar>(g: &[T], xhat: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for smp in 0..n {
        for ch in 0..c {
            let off = (smp * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += g[i] * xhat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    (dgamma, dbeta)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
