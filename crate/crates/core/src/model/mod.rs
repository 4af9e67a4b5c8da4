//! ResNet-style classifier with named, prunable convolutions.
//!
//! Layout: a 3x3 stride-2 stem, then stages of basic blocks (two 3x3 convs
//! plus an identity or 1x1 projection skip), global average pooling,
//! dropout and a fully connected head. Every stage after the first halves
//! the spatial extent.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Graph, Real, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    pub dropout_p: f64,
    pub input_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: vec![2, 2, 2, 2],
            num_classes: 4,
            dropout_p: 0.4,
            input_size: 64,
        }
    }
}

impl NetConfig {
    /// ResNet-18 widths.
    pub fn resnet18_widths() -> Self {
        Self {
            stage_channels: vec![64, 128, 256, 512],
            ..Self::default()
        }
    }

    /// Stride-2 reductions between input and the last feature map.
    pub fn reductions(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.is_empty() {
            return bad("stage_channels must not be empty".into());
        }
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "stage_channels has {} entries but blocks_per_stage has {}",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            ));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c < 4) {
            return bad(format!("stage width {c} is below the minimum of 4"));
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        let min = 1usize << self.reductions();
        if self.input_size < min {
            return bad(format!(
                "input_size {} too small for {} stride-2 reductions (need >= {min})",
                self.input_size,
                self.reductions()
            ));
        }
        Ok(())
    }

    /// Spatial extent of the last feature map.
    pub fn final_grid(&self) -> usize {
        let mut s = self.input_size;
        for _ in 0..self.reductions() {
            s = (s - 1) / 2 + 1;
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T: Real> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: Tensor<T>,
}

/// Indices of a batch norm's tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnRef {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvRef {
    pub weight: usize,
    pub bn: BnRef,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub conv1: ConvRef,
    pub conv2: ConvRef,
    pub proj: Option<ConvRef>,
}

/// A convolution that channel pruning may mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunableLayer {
    pub name: String,
    pub conv: ConvRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet<T: Real = f32> {
    config: NetConfig,
    tensors: Vec<NamedTensor<T>>,
    stem: ConvRef,
    blocks: Vec<Block>,
    fc_weight: usize,
    fc_bias: usize,
}

/// Values recorded by one forward pass.
pub struct Trace {
    pub logits: Var,
    /// Pooled penultimate features `[N, C_last]`.
    pub features: Var,
    /// Output of every unit: index 0 is the stem, then one per block.
    pub unit_outputs: Vec<Var>,
    pub bn_stats: Vec<(BnRef, BnStats)>,
}

/// Replaces a unit's output before the rest of the network consumes it.
pub struct Intervention<'a, T: Real> {
    pub unit: usize,
    pub edit: &'a dyn Fn(&mut Tensor<T>),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardMode {
    pub train: bool,
    pub dropout_seed: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            train: true,
            dropout_seed,
        }
    }
}

struct Builder<T: Real> {
    tensors: Vec<NamedTensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, kind: TensorKind, tensor: Tensor<T>) -> usize {
        let tensor = if kind == TensorKind::Param { tensor.with_grad() } else { tensor };
        self.tensors.push(NamedTensor { name, kind, tensor });
        self.tensors.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.gen_range(-bound..bound))).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnRef {
        BnRef {
            gamma: self.push(format!("{prefix}.weight"), TensorKind::Param, Tensor::full(&[c], T::one())),
            beta: self.push(format!("{prefix}.bias"), TensorKind::Param, Tensor::zeros(&[c])),
            mean: self.push(format!("{prefix}.running_mean"), TensorKind::Buffer, Tensor::zeros(&[c])),
            var: self.push(format!("{prefix}.running_var"), TensorKind::Buffer, Tensor::full(&[c], T::one())),
        }
    }

    /// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    fn conv(&mut self, conv_name: &str, bn_name: &str, shape: [usize; 4], stride: usize) -> ConvRef {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let w = self.uniform(&shape, (6.0 / fan_in).sqrt());
        let weight = self.push(format!("{conv_name}.weight"), TensorKind::Param, w);
        let bn = self.bn(bn_name, shape[0]);
        ConvRef {
            weight,
            bn,
            stride,
            pad: shape[2] / 2,
        }
    }
}

impl<T: Real> ResidualNet<T> {
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c0 = config.stage_channels[0];
        let stem = b.conv("stem.conv", "stem.bn", [c0, 3, 3, 3], 2);
        let mut blocks = Vec::new();
        let mut in_c = c0;
        for (s, (&width, &count)) in config.stage_channels.iter().zip(&config.blocks_per_stage).enumerate() {
            for i in 0..count {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let name = format!("layer{}.{}", s + 1, i);
                let conv1 = b.conv(&format!("{name}.conv1"), &format!("{name}.bn1"), [width, in_c, 3, 3], stride);
                let conv2 = b.conv(&format!("{name}.conv2"), &format!("{name}.bn2"), [width, width, 3, 3], 1);
                let proj = (stride != 1 || in_c != width).then(|| {
                    b.conv(
                        &format!("{name}.downsample.conv"),
                        &format!("{name}.downsample.bn"),
                        [width, in_c, 1, 1],
                        stride,
                    )
                });
                blocks.push(Block {
                    name,
                    conv1,
                    conv2,
                    proj,
                });
                in_c = width;
            }
        }
        let bound = 1.0 / (in_c as f64).sqrt();
        let w = b.uniform(&[config.num_classes, in_c], bound);
        let fc_weight = b.push("fc.weight".into(), TensorKind::Param, w);
        let fc_bias = b.push("fc.bias".into(), TensorKind::Param, Tensor::zeros(&[config.num_classes]));
        Ok(Self {
            config: config.clone(),
            tensors: b.tensors,
            stem,
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[NamedTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.tensors[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index].tensor
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn stem(&self) -> ConvRef {
        self.stem
    }

    pub fn fc(&self) -> (usize, usize) {
        (self.fc_weight, self.fc_bias)
    }

    pub fn num_params(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| t.tensor.numel())
            .sum()
    }

    /// Main-path convolutions in network order. The stem and the projection
    /// skips are excluded.
    pub fn prunable_layers(&self) -> Vec<PrunableLayer> {
        self.blocks
            .iter()
            .flat_map(|b| {
                [
                    PrunableLayer {
                        name: format!("{}.conv1", b.name),
                        conv: b.conv1,
                    },
                    PrunableLayer {
                        name: format!("{}.conv2", b.name),
                        conv: b.conv2,
                    },
                ]
            })
            .collect()
    }

    pub fn prunable_layer(&self, name: &str) -> Result<PrunableLayer> {
        self.prunable_layers()
            .into_iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Hook points: `stem`, then every block name (`layer1.0`, ...).
    pub fn unit_names(&self) -> Vec<String> {
        std::iter::once("stem".to_string())
            .chain(self.blocks.iter().map(|b| b.name.clone()))
            .collect()
    }

    pub fn unit_index(&self, name: &str) -> Result<usize> {
        self.unit_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Output of the final residual block, wrapping the last convolution.
    pub fn last_conv_unit(&self) -> usize {
        self.blocks.len()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape("forward", shape, &[shape.first().copied().unwrap_or(0), 3, s, s]));
        }
        Ok(())
    }

    /// Inserts every tensor as a leaf. Parameters are differentiable only
    /// when `grad` is set.
    pub fn bind(&self, g: &mut Graph<T>, grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if grad && t.kind == TensorKind::Param {
                    g.leaf(&t.tensor)
                } else {
                    let mut plain = t.tensor.clone();
                    plain.requires_grad = false;
                    g.input(plain)
                }
            })
            .collect()
    }

    fn conv_bn(&self, g: &mut Graph<T>, p: &[Var], x: Var, c: &ConvRef, train: bool, stats: &mut Vec<(BnRef, BnStats)>) -> Result<Var> {
        let y = g.conv2d(x, p[c.weight], c.stride, c.pad)?;
        if train {
            let (z, s) = g.batch_norm_train(y, p[c.bn.gamma], p[c.bn.beta], BN_EPS)?;
            stats.push((c.bn, s));
            Ok(z)
        } else {
            let mean = self.tensor(c.bn.mean).to_f64_vec();
            let var = self.tensor(c.bn.var).to_f64_vec();
            g.batch_norm_eval(y, p[c.bn.gamma], p[c.bn.beta], &mean, &var, BN_EPS)
        }
    }

    /// Runs units `from..` on `x`, the input of unit `from`.
    pub fn forward_from(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        x: Var,
        from: usize,
        mode: ForwardMode,
        intervention: Option<&Intervention<'_, T>>,
    ) -> Result<Trace> {
        let mut stats = Vec::new();
        let mut outputs = Vec::new();
        let mut h = x;
        for unit in from..=self.blocks.len() {
            h = if unit == 0 {
                let s = self.conv_bn(g, bound, h, &self.stem, mode.train, &mut stats)?;
                g.relu(s)?
            } else {
                let b = &self.blocks[unit - 1];
                let a = self.conv_bn(g, bound, h, &b.conv1, mode.train, &mut stats)?;
                let a = g.relu(a)?;
                let a = self.conv_bn(g, bound, a, &b.conv2, mode.train, &mut stats)?;
                let skip = match &b.proj {
                    Some(p) => self.conv_bn(g, bound, h, p, mode.train, &mut stats)?,
                    None => h,
                };
                let sum = g.add(a, skip)?;
                g.relu(sum)?
            };
            if let Some(iv) = intervention.filter(|iv| iv.unit == unit) {
                let mut edited = g.value(h).clone();
                edited.requires_grad = false;
                (iv.edit)(&mut edited);
                h = g.input(edited);
            }
            outputs.push(h);
        }
        let features = g.global_avg_pool(h)?;
        let dropped = if mode.train && self.config.dropout_p > 0.0 {
            let p = self.config.dropout_p;
            let keep = T::from_f64(1.0 / (1.0 - p));
            let mut rng = ChaCha8Rng::seed_from_u64(mode.dropout_seed);
            let mask = (0..g.value(features).numel())
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                .collect();
            g.dropout(features, mask)?
        } else {
            features
        };
        let logits = g.linear(dropped, bound[self.fc_weight], Some(bound[self.fc_bias]))?;
        Ok(Trace {
            logits,
            features,
            unit_outputs: outputs,
            bn_stats: stats,
        })
    }

    /// Full forward pass from an `N x 3 x H x W` batch.
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], input: Var, mode: ForwardMode) -> Result<Trace> {
        self.check_input(g.value(input).shape())?;
        self.forward_from(g, bound, input, 0, mode, None)
    }

    /// Eval-mode logits `[N, num_classes]`.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.input(batch.clone());
        let trace = self.forward_from(&mut g, &bound, x, 0, ForwardMode::eval(), None)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Eval-mode logits and pooled features.
    pub fn logits_and_features(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.input(batch.clone());
        let trace = self.forward_from(&mut g, &bound, x, 0, ForwardMode::eval(), None)?;
        Ok((g.value(trace.logits).clone(), g.value(trace.features).clone()))
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(BnRef, BnStats)]) {
        for (bn, s) in stats {
            for (dst, src) in [(bn.mean, &s.mean), (bn.var, &s.var)] {
                let t = self.tensor_mut(dst);
                for (r, &b) in t.data_mut().iter_mut().zip(src.iter()) {
                    *r = T::from_f64((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * b);
                }
            }
        }
    }

    /// Copies graph gradients into each parameter's `grad` slot.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(bound) {
            if t.kind != TensorKind::Param {
                continue;
            }
            t.tensor.grad = Some(match g.grad(v) {
                Ok(gr) => gr.to_vec(),
                Err(_) => vec![T::zero(); t.tensor.numel()],
            });
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> ResidualNet<U> {
        ResidualNet {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    kind: t.kind,
                    tensor: t.tensor.cast(),
                })
                .collect(),
            stem: self.stem,
            blocks: self.blocks.clone(),
            fc_weight: self.fc_weight,
            fc_bias: self.fc_bias,
        }
    }
}

/// Central-difference gradient check of the training loss (train mode,
/// fixed dropout mask) over at least `samples` random parameters.
pub fn net_gradient_check<T: Real>(
    net: &mut ResidualNet<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<crate::tensor::GradCheckReport> {
    let template = net.clone();
    let param_idx: Vec<usize> = (0..net.tensors.len())
        .filter(|&i| net.tensors[i].kind == TensorKind::Param)
        .collect();
    let mut params: Vec<Tensor<T>> = param_idx.iter().map(|&i| net.tensor(i).clone()).collect();
    let report = crate::tensor::finite_diff_check(
        &mut params,
        |p| {
            let mut trial = template.clone();
            for (&i, t) in param_idx.iter().zip(p) {
                *trial.tensor_mut(i) = t.clone();
            }
            let mut g = Graph::new();
            let bound = trial.bind(&mut g, true);
            let x = g.input(batch.clone());
            let trace = trial.forward(&mut g, &bound, x, ForwardMode::train(seed))?;
            let loss = g.softmax_cross_entropy(trace.logits, labels)?;
            let leaves = param_idx.iter().map(|&i| bound[i]).collect();
            Ok((g, loss, leaves))
        },
        epsilon,
        samples,
        seed,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            input_size: 8,
            ..NetConfig::default()
        }
    }

    fn random_batch(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(&[n, 3, size, size], data).unwrap()
    }

    #[test]
    fn default_logit_shape() {
        let net = ResidualNet::<f32>::build(&NetConfig::default(), 1).unwrap();
        let y = net.logits(&random_batch(2, 64, 0)).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
    }

    #[test]
    fn rejects_tiny_input() {
        let cfg = NetConfig {
            input_size: 8,
            ..NetConfig::default()
        };
        assert!(matches!(ResidualNet::<f32>::build(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_yields_fc_bias() {
        let mut net = ResidualNet::<f32>::build(&NetConfig::default(), 3).unwrap();
        let (_, b) = net.fc();
        net.tensor_mut(b).data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let y = net.logits(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = ResidualNet::<f32>::build(&NetConfig::default(), 9).unwrap();
        let b = ResidualNet::<f32>::build(&NetConfig::default(), 9).unwrap();
        let c = ResidualNet::<f32>::build(&NetConfig::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn eval_is_pure_and_train_dropout_varies() {
        let net = ResidualNet::<f32>::build(&small(), 1).unwrap();
        let x = random_batch(2, 8, 5);
        assert_eq!(net.logits(&x).unwrap(), net.logits(&x).unwrap());
        let run = |seed| {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, false);
            let xi = g.input(x.clone());
            let t = net.forward(&mut g, &bound, xi, ForwardMode::train(seed)).unwrap();
            g.value(t.logits).clone()
        };
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn features_have_last_stage_width() {
        let net = ResidualNet::<f32>::build(&NetConfig::default(), 1).unwrap();
        let (_, f) = net.logits_and_features(&random_batch(3, 64, 1)).unwrap();
        assert_eq!(f.shape(), &[3, 128]);
    }

    #[test]
    fn skip_shapes_agree_across_configs() {
        for (widths, blocks, size) in [
            (vec![4, 4, 4, 4], vec![1, 1, 1, 1], 16),
            (vec![4, 8, 16, 32], vec![2, 1, 3, 1], 33),
            (vec![8, 8], vec![3, 2], 12),
            (vec![6, 12, 24], vec![1, 2, 1], 20),
        ] {
            let cfg = NetConfig {
                stage_channels: widths.clone(),
                blocks_per_stage: blocks,
                input_size: size,
                ..NetConfig::default()
            };
            let net = ResidualNet::<f32>::build(&cfg, 0).unwrap();
            let y = net.logits(&random_batch(1, size, 0)).unwrap();
            assert_eq!(y.shape(), &[1, 4]);
            let mut g = Graph::new();
            let bound = net.bind(&mut g, false);
            let x = g.input(random_batch(1, size, 1));
            let t = net.forward(&mut g, &bound, x, ForwardMode::eval()).unwrap();
            let last = g.value(*t.unit_outputs.last().unwrap()).shape().to_vec();
            assert_eq!(last, vec![1, *widths.last().unwrap(), cfg.final_grid(), cfg.final_grid()]);
        }
    }

    #[test]
    fn layer_names_unique() {
        let net = ResidualNet::<f32>::build(&NetConfig::default(), 0).unwrap();
        let mut names: Vec<_> = net.tensors().iter().map(|t| t.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(net.prunable_layers().len(), 16);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = ResidualNet::<f32>::build(&small(), 0).unwrap();
        assert!(net.logits(&random_batch(1, 9, 0)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net32 = ResidualNet::<f32>::build(&small(), 4).unwrap();
        let mut net = net32.cast::<f64>();
        let batch = random_batch(4, 8, 2).cast::<f64>();
        let report = net_gradient_check(&mut net, &batch, &[0, 1, 2, 3], 1e-3, 60, 11).unwrap();
        assert!(report.checked >= 50, "{report:?}");
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
