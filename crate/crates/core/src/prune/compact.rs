use crate::error::Result;
use crate::model::{BnRef, ConvRef, ResidualNet, BN_EPS};
use crate::tensor::{conv2d_forward, Real, Tensor};

use super::PruneMasks;

struct Bn {
    scale: Vec<f64>,
    shift: Vec<f64>,
}

struct Conv<T: Real> {
    weight: Tensor<T>,
    bn: Bn,
    stride: usize,
    pad: usize,
}

struct CompactBlock<T: Real> {
    conv1: Conv<T>,
    conv2: Conv<T>,
    /// Skip channel receiving each surviving conv2 output.
    scatter: Vec<usize>,
    proj: Option<Conv<T>>,
}

/// Eval-only copy of a masked net with inactive channels physically removed.
pub struct CompactNet<T: Real> {
    stem: Conv<T>,
    blocks: Vec<CompactBlock<T>>,
    fc_weight: Vec<f64>,
    fc_bias: Vec<f64>,
    num_classes: usize,
}

fn active(masks: &PruneMasks, name: &str, c: usize) -> Vec<usize> {
    match masks.get(name) {
        Some(m) => (0..c).filter(|&i| m[i]).collect(),
        None => (0..c).collect(),
    }
}

fn bn_of<T: Real>(net: &ResidualNet<T>, bn: &BnRef, keep: &[usize]) -> Bn {
    let g = net.tensor(bn.gamma).to_f64_vec();
    let b = net.tensor(bn.beta).to_f64_vec();
    let m = net.tensor(bn.mean).to_f64_vec();
    let v = net.tensor(bn.var).to_f64_vec();
    let scale: Vec<f64> = keep.iter().map(|&c| g[c] / (v[c] + BN_EPS).sqrt()).collect();
    let shift = keep.iter().zip(&scale).map(|(&c, s)| b[c] - m[c] * s).collect();
    Bn { scale, shift }
}

fn conv_of<T: Real>(net: &ResidualNet<T>, c: &ConvRef, outs: &[usize], ins: Option<&[usize]>) -> Result<Conv<T>> {
    let w = net.tensor(c.weight);
    let [_, cin, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let all: Vec<usize> = (0..cin).collect();
    let ins = ins.unwrap_or(&all);
    let mut data = Vec::with_capacity(outs.len() * ins.len() * kh * kw);
    for &o in outs {
        for &i in ins {
            let start = ((o * cin) + i) * kh * kw;
            data.extend_from_slice(&w.data()[start..start + kh * kw]);
        }
    }
    Ok(Conv {
        weight: Tensor::new(&[outs.len(), ins.len(), kh, kw], data)?,
        bn: bn_of(net, &c.bn, outs),
        stride: c.stride,
        pad: c.pad,
    })
}

impl<T: Real> Conv<T> {
    fn run(&self, x: &Tensor<T>, relu: bool) -> Result<Tensor<T>> {
        let mut y = conv2d_forward(x, &self.weight, self.stride, self.pad)?;
        let c = y.shape()[1];
        let plane = y.shape()[2] * y.shape()[3];
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            for v in chunk.iter_mut() {
                let z = v.as_f64() * self.bn.scale[ch] + self.bn.shift[ch];
                *v = T::from_f64(if relu { z.max(0.0) } else { z });
            }
        }
        Ok(y)
    }
}

impl<T: Real> CompactNet<T> {
    pub fn from_masked(net: &ResidualNet<T>, masks: &PruneMasks) -> Result<Self> {
        masks.check_against(net)?;
        let stem_c = net.tensor(net.stem().weight).shape()[0];
        let stem = conv_of(net, &net.stem(), &(0..stem_c).collect::<Vec<_>>(), None)?;
        let mut blocks = Vec::new();
        for b in net.blocks() {
            let c1 = net.tensor(b.conv1.weight).shape()[0];
            let c2 = net.tensor(b.conv2.weight).shape()[0];
            let keep1 = active(masks, &format!("{}.conv1", b.name), c1);
            let keep2 = active(masks, &format!("{}.conv2", b.name), c2);
            blocks.push(CompactBlock {
                conv1: conv_of(net, &b.conv1, &keep1, None)?,
                conv2: conv_of(net, &b.conv2, &keep2, Some(&keep1))?,
                scatter: keep2,
                proj: match &b.proj {
                    Some(p) => Some(conv_of(net, p, &(0..c2).collect::<Vec<_>>(), None)?),
                    None => None,
                },
            });
        }
        let (w, bias) = net.fc();
        Ok(Self {
            stem,
            blocks,
            fc_weight: net.tensor(w).to_f64_vec(),
            fc_bias: net.tensor(bias).to_f64_vec(),
            num_classes: net.config().num_classes,
        })
    }

    /// Main-path conv weights kept after compaction.
    pub fn main_path_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.conv1.weight.numel() + b.conv2.weight.numel())
            .sum()
    }

    pub fn logits(&self, batch: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let mut h = self.stem.run(batch, true)?;
        for b in &self.blocks {
            let a = b.conv1.run(&h, true)?;
            let a = b.conv2.run(&a, false)?;
            let mut out = match &b.proj {
                Some(p) => p.run(&h, false)?,
                None => h.clone(),
            };
            let (n, c, plane) = (out.shape()[0], out.shape()[1], out.shape()[2] * out.shape()[3]);
            let kept = b.scatter.len();
            for img in 0..n {
                for (k, &dst) in b.scatter.iter().enumerate() {
                    let src = &a.data()[(img * kept + k) * plane..(img * kept + k + 1) * plane];
                    let o = &mut out.data_mut()[(img * c + dst) * plane..(img * c + dst + 1) * plane];
                    for (y, x) in o.iter_mut().zip(src) {
                        *y = *y + *x;
                    }
                }
            }
            out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
            h = out;
        }
        let (n, c, plane) = (h.shape()[0], h.shape()[1], h.shape()[2] * h.shape()[3]);
        let mut logits = Vec::with_capacity(n);
        for img in 0..n {
            let pooled: Vec<f64> = (0..c)
                .map(|ch| {
                    let s = &h.data()[(img * c + ch) * plane..(img * c + ch + 1) * plane];
                    s.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64
                })
                .collect();
            logits.push(
                (0..self.num_classes)
                    .map(|k| self.fc_bias[k] + (0..c).map(|j| self.fc_weight[k * c + j] * pooled[j]).sum::<f64>())
                    .collect(),
            );
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use crate::prune::prune_step;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compacted_twin_matches_masked_net() {
        let cfg = NetConfig {
            stage_channels: vec![10, 20, 20],
            blocks_per_stage: vec![2, 1, 1],
            input_size: 16,
            ..NetConfig::default()
        };
        let mut net = ResidualNet::<f32>::build(&cfg, 5).unwrap();
        // non-trivial running statistics
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in net.tensors_mut() {
            if t.name.ends_with("running_mean") || t.name.ends_with("bias") {
                t.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
        }
        let mut masks = PruneMasks::all_active(&net);
        for _ in 0..3 {
            masks = prune_step(&mut net, &masks, 0.2).unwrap().masks;
        }
        let twin = CompactNet::from_masked(&net, &masks).unwrap();
        let data = (0..2 * 3 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[2, 3, 16, 16], data).unwrap();
        let masked = net.logits(&x).unwrap();
        let compact = twin.logits(&x).unwrap();
        for (row, twin_row) in masked.data().chunks(4).zip(&compact) {
            for (a, b) in row.iter().zip(twin_row) {
                assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
        let dense: usize = net
            .prunable_layers()
            .iter()
            .map(|l| net.tensor(l.conv.weight).numel())
            .sum();
        assert!(twin.main_path_params() < dense);
    }
}
