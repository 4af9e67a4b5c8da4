use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::conv::{self, ConvGeometry};
use super::{sigmoid, softmax, softplus, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batch norm, used to update the
/// running estimates.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f64>,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geo: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    GlobalAvgPool(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SelectClass {
        logits: Var,
        class: usize,
    },
    Softplus(Var),
    DivRows {
        num: Var,
        den: Var,
    },
    Reshape(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape. Node order is a topological order, so backward is a
/// single reverse sweep.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        // Non-differentiable results keep only their value.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf; it is differentiable iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let mut value = tensor.clone();
        value.grad = None;
        let rg = tensor.requires_grad;
        self.push(value, Op::Leaf, rg)
    }

    /// Inserts an owned tensor as a leaf, keeping its `requires_grad` flag.
    pub fn input(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Result<&[T]> {
        self.grads[v.0]
            .as_deref()
            .ok_or(Error::GradientUnavailable(v.0))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(input).shape(), self.value(weight).shape(), stride, pad)?;
        let out = conv::forward_raw(&geo, self.value(input).data(), self.value(weight).data());
        check_finite("conv2d", &out)?;
        let value = Tensor::new(&geo.output_shape(), out)?;
        let rg = self.rg(&[input, weight]);
        Ok(self.push(value, Op::Conv2d { input, weight, geo }, rg))
    }

    fn bn_dims(shape: &[usize], gamma: &[usize], beta: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() < 2 || gamma != [shape[1]] || beta != [shape[1]] {
            return Err(Error::shape("batch_norm", shape, gamma));
        }
        Ok((shape[0], shape[1], shape[2..].iter().product()))
    }

    /// Normalizes with batch statistics; returns them for running updates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnStats)> {
        let x = self.value(input);
        let (n, c, plane) = Self::bn_dims(x.shape(), self.value(gamma).shape(), self.value(beta).shape())?;
        let count = (n * plane) as f64;
        let xd = x.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xd[(b * c + ch) * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = s / count;
            let mut q = 0.0;
            for b in 0..n {
                q += xd[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = q / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(input, gamma, beta, &mean, &inv_std, n, c, plane);
        check_finite("batch_norm", &out)?;
        let unbiased = if count > 1.0 {
            var.iter().map(|v| v * count / (count - 1.0)).collect()
        } else {
            var.clone()
        };
        let value = Tensor::new(self.value(input).shape(), out)?;
        let rg = self.rg(&[input, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((v, BnStats { mean, var: unbiased }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, plane) = Self::bn_dims(x.shape(), self.value(gamma).shape(), self.value(beta).shape())?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", x.shape(), &[running_mean.len()]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(input, gamma, beta, running_mean, &inv_std, n, c, plane);
        check_finite("batch_norm", &out)?;
        let value = Tensor::new(self.value(input).shape(), out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        c: usize,
        plane: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xd = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (m, is) = (mean[ch], inv_std[ch]);
                let (gg, bb) = (g[ch].as_f64(), bt[ch].as_f64());
                for i in off..off + plane {
                    let h = (xd[i].as_f64() - m) * is;
                    xhat[i] = T::from_f64(h);
                    out[i] = T::from_f64(gg * h + bb);
                }
            }
        }
        (xhat, out)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data: Vec<T> = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Relu(input), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let data: Vec<T> = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        check_finite("add", &data)?;
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data: Vec<T> = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        check_finite("mul", &data)?;
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let data: Vec<T> = x.data().iter().map(|&v| T::from_f64(v.as_f64() * factor)).collect();
        check_finite("scale", &data)?;
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Scale(input, factor), rg))
    }

    /// `[N, C, H, W] -> [N, C]`
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(Error::shape("global_avg_pool", x.shape(), &[0, 0, 0, 0]));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane = x.shape()[2] * x.shape()[3];
        let data: Vec<T> = x
            .data()
            .chunks(plane)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// Multiplies by a precomputed inverted-dropout mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.numel() {
            return Err(Error::shape("dropout", x.shape(), &[mask.len()]));
        }
        let data: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    /// `x [N, F] * W^T [F, O] + b [O]`
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::shape("linear", x.shape(), w.shape()));
        }
        let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(Error::shape("linear", w.shape(), bv.shape()));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(n, f, o, T::one(), x.data(), f as isize, 1, w.data(), 1, f as isize, beta, &mut out, o as isize, 1);
        check_finite("linear", &out)?;
        let value = Tensor::new(&[n, o], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Mean cross-entropy of `logits [N, K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().len() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", z.shape(), &[labels.len()]));
        }
        let k = z.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(z.numel());
        let mut loss = 0.0;
        for (row, &y) in z.data().chunks(k).zip(labels) {
            let zr: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let p = softmax(&zr);
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            probs.extend(p);
        }
        loss /= labels.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "softmax_cross_entropy" });
        }
        let value = Tensor::scalar(T::from_f64(loss));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = super::sum_f64(self.value(input).data());
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(input), rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = super::sum_f64(x.data()) / x.numel() as f64;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Mean(input), rg))
    }

    /// Sum over the batch of `logits[:, class]`.
    pub fn select_class(&mut self, logits: Var, class: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().len() != 2 || class >= z.shape()[1] {
            return Err(Error::shape("select_class", z.shape(), &[class]));
        }
        let k = z.shape()[1];
        let s: f64 = z.data().chunks(k).map(|r| r[class].as_f64()).sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::SelectClass { logits, class }, rg))
    }

    pub fn softplus(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data: Vec<T> = x.data().iter().map(|&v| T::from_f64(softplus(v.as_f64()))).collect();
        check_finite("softplus", &data)?;
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Softplus(input), rg))
    }

    /// Row-wise division: `num [N, K] / den [N, 1]`.
    pub fn div_rows(&mut self, num: Var, den: Var) -> Result<Var> {
        let (a, d) = (self.value(num), self.value(den));
        if a.shape().len() != 2 || d.numel() != a.shape()[0] {
            return Err(Error::shape("div_rows", a.shape(), d.shape()));
        }
        let k = a.shape()[1];
        let data: Vec<T> = a
            .data()
            .chunks(k)
            .zip(d.data())
            .flat_map(|(row, &t)| row.iter().map(move |&v| v / t))
            .collect();
        check_finite("div_rows", &data)?;
        let value = Tensor::new(a.shape(), data)?;
        let rg = self.rg(&[num, den]);
        Ok(self.push(value, Op::DivRows { num, den }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Hash of every ReLU's on/off pattern; changes when an input crosses a kink.
    pub fn relu_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(input) = node.op {
                for v in self.nodes[input.0].value.data() {
                    (*v > T::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Populates gradients of `loss` with respect to every differentiable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::GradientUnavailable(loss.0));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.propagate(i, &gy)?;
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, i: usize, gy: &[T]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geo } => {
                let (dx, dw) = conv::backward_raw(
                    geo,
                    val(*input).data(),
                    val(*weight).data(),
                    gy,
                    needs(*input),
                    needs(*weight),
                );
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dw.map(|d| (*weight, d)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = val(*input).shape();
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let g = val(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for j in off..off + plane {
                            let d = gy[j].as_f64();
                            dgamma[ch] += d * xhat[j].as_f64();
                            dbeta[ch] += d;
                        }
                    }
                }
                if needs(*input) {
                    let mut dx = vec![T::zero(); gy.len()];
                    let m = (n * plane) as f64;
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let scale = g[ch].as_f64() * inv_std[ch];
                            for j in off..off + plane {
                                let d = gy[j].as_f64();
                                dx[j] = if *train {
                                    T::from_f64(scale / m * (m * d - dbeta[ch] - xhat[j].as_f64() * dgamma[ch]))
                                } else {
                                    T::from_f64(scale * d)
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma.into_iter().map(T::from_f64).collect()));
                out.push((*beta, dbeta.into_iter().map(T::from_f64).collect()));
            }
            Op::Relu(input) => {
                let x = val(*input).data();
                let d = x
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*input, d));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                out.push((*a, gy.iter().zip(y).map(|(&g, &q)| g * q).collect()));
                out.push((*b, gy.iter().zip(x).map(|(&g, &p)| g * p).collect()));
            }
            Op::Scale(input, f) => {
                out.push((*input, gy.iter().map(|&g| T::from_f64(g.as_f64() * f)).collect()));
            }
            Op::GlobalAvgPool(input) => {
                let shape = val(*input).shape();
                let plane = shape[2] * shape[3];
                let inv = 1.0 / plane as f64;
                let d = gy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(T::from_f64(g.as_f64() * inv), plane))
                    .collect();
                out.push((*input, d));
            }
            Op::Dropout { input, mask } => {
                out.push((*input, gy.iter().zip(mask).map(|(&g, &m)| g * m).collect()));
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (val(*input), val(*weight));
                let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if needs(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, o, f, T::one(), gy, o as isize, 1, w.data(), f as isize, 1, T::zero(), &mut dx, f as isize, 1);
                    out.push((*input, dx));
                }
                if needs(*weight) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(o, n, f, T::one(), gy, 1, o as isize, x.data(), f as isize, 1, T::zero(), &mut dw, f as isize, 1);
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0f64; o];
                    for row in gy.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g.as_f64());
                    }
                    out.push((*b, db.into_iter().map(T::from_f64).collect()));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape()[1];
                let scale = gy[0].as_f64() / labels.len() as f64;
                let mut d: Vec<T> = probs.iter().map(|&p| T::from_f64(p * scale)).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] = T::from_f64((probs[r * k + y] - 1.0) * scale);
                }
                out.push((*logits, d));
            }
            Op::Sum(input) => {
                out.push((*input, vec![gy[0]; val(*input).numel()]));
            }
            Op::Mean(input) => {
                let n = val(*input).numel();
                out.push((*input, vec![T::from_f64(gy[0].as_f64() / n as f64); n]));
            }
            Op::SelectClass { logits, class } => {
                let z = val(*logits);
                let k = z.shape()[1];
                let mut d = vec![T::zero(); z.numel()];
                for r in 0..z.shape()[0] {
                    d[r * k + class] = gy[0];
                }
                out.push((*logits, d));
            }
            Op::Softplus(input) => {
                let x = val(*input).data();
                out.push((
                    *input,
                    x.iter()
                        .zip(gy)
                        .map(|(&v, &g)| T::from_f64(g.as_f64() * sigmoid(v.as_f64())))
                        .collect(),
                ));
            }
            Op::DivRows { num, den } => {
                let (a, d) = (val(*num), val(*den));
                let k = a.shape()[1];
                if needs(*num) {
                    let dn = gy
                        .chunks(k)
                        .zip(d.data())
                        .flat_map(|(row, &t)| row.iter().map(move |&g| g / t))
                        .collect();
                    out.push((*num, dn));
                }
                if needs(*den) {
                    let dd = gy
                        .chunks(k)
                        .zip(a.data().chunks(k))
                        .zip(d.data())
                        .map(|((g, z), &t)| {
                            let t = t.as_f64();
                            let s: f64 = g.iter().zip(z).map(|(&g, &z)| g.as_f64() * z.as_f64()).sum();
                            T::from_f64(-s / (t * t))
                        })
                        .collect();
                    out.push((*den, dd));
                }
            }
            Op::Reshape(input) => {
                out.push((*input, gy.to_vec()));
            }
        }
        for (v, g) in out {
            self.accumulate(v, g);
        }
        Ok(())
    }
}
