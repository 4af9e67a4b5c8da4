//! Structured L1-norm channel pruning by masking.

mod compact;
mod iterate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PrunableLayer, ResidualNet};
use crate::tensor::Real;

pub use compact::CompactNet;
pub use iterate::{iterate, FoldModel, PruneSchedule, StepReport};

/// Active output channels per prunable conv (`true` = active).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneMasks {
    pub layers: BTreeMap<String, Vec<bool>>,
}

impl PruneMasks {
    pub fn all_active<T: Real>(net: &ResidualNet<T>) -> Self {
        let layers = net
            .prunable_layers()
            .into_iter()
            .map(|l| {
                let c = net.tensor(l.conv.weight).shape()[0];
                (l.name, vec![true; c])
            })
            .collect();
        Self { layers }
    }

    /// Every entry names a prunable layer with the right channel count.
    pub fn check_against<T: Real>(&self, net: &ResidualNet<T>) -> Result<()> {
        for (name, mask) in &self.layers {
            let layer = net.prunable_layer(name)?;
            let c = net.tensor(layer.conv.weight).shape()[0];
            if mask.len() != c {
                return Err(Error::Invalid(format!("mask for {name} has {} entries, layer has {c} channels", mask.len())));
            }
        }
        Ok(())
    }

    pub fn get(&self, layer: &str) -> Option<&[bool]> {
        self.layers.get(layer).map(Vec::as_slice)
    }

    pub fn active_count(&self, layer: &str) -> Option<usize> {
        self.get(layer).map(|m| m.iter().filter(|&&a| a).count())
    }

    /// No channel that is inactive in `earlier` is active here.
    pub fn is_monotone_after(&self, earlier: &PruneMasks) -> bool {
        earlier.layers.iter().all(|(name, old)| match self.layers.get(name) {
            Some(new) => old.iter().zip(new).all(|(&o, &n)| o || !n),
            None => old.iter().all(|&a| a),
        })
    }

    fn inactive<'a>(&'a self, layers: &'a [PrunableLayer]) -> impl Iterator<Item = (&'a PrunableLayer, usize)> + 'a {
        layers.iter().flat_map(move |l| {
            self.get(&l.name)
                .into_iter()
                .flat_map(|m| m.iter().enumerate().filter(|(_, &a)| !a).map(|(c, _)| c))
                .map(move |c| (l, c))
        })
    }

    /// Zeroes conv weights and norm scale/shift of every inactive channel.
    pub fn apply<T: Real>(&self, net: &mut ResidualNet<T>) {
        let layers = net.prunable_layers();
        for (l, c) in self.inactive(&layers) {
            let w = net.tensor_mut(l.conv.weight);
            let per = w.numel() / w.shape()[0];
            w.data_mut()[c * per..(c + 1) * per].iter_mut().for_each(|v| *v = T::zero());
            for idx in [l.conv.bn.gamma, l.conv.bn.beta] {
                net.tensor_mut(idx).data_mut()[c] = T::zero();
            }
        }
    }

    /// Zeroes the gradients of every inactive channel's parameters.
    pub fn mask_grads<T: Real>(&self, net: &mut ResidualNet<T>) {
        let layers = net.prunable_layers();
        for (l, c) in self.inactive(&layers) {
            let w = net.tensor_mut(l.conv.weight);
            let per = w.numel() / w.shape()[0];
            if let Some(g) = &mut w.grad {
                g[c * per..(c + 1) * per].iter_mut().for_each(|v| *v = T::zero());
            }
            for idx in [l.conv.bn.gamma, l.conv.bn.beta] {
                if let Some(g) = &mut net.tensor_mut(idx).grad {
                    g[c] = T::zero();
                }
            }
        }
    }
}

/// L1 norm of each output channel's kernel; inactive channels rank at -inf.
pub fn channel_importance<T: Real>(net: &ResidualNet<T>, masks: &PruneMasks, layer: &str) -> Result<Vec<f64>> {
    let l = net.prunable_layer(layer)?;
    let w = net.tensor(l.conv.weight);
    let per = w.numel() / w.shape()[0];
    let mask = masks.get(layer);
    Ok(w.data()
        .chunks(per)
        .enumerate()
        .map(|(c, k)| match mask {
            Some(m) if !m[c] => f64::NEG_INFINITY,
            _ => k.iter().map(|v| v.as_f64().abs()).sum(),
        })
        .collect())
}

/// Channels to deactivate: the `floor(fraction * active)` lowest-importance
/// active channels, lower index first on ties. Returns them in ascending
/// channel order. Never empties a layer.
pub fn select_channels(importance: &[f64], active: &[bool], fraction: f64) -> Vec<usize> {
    let mut live: Vec<usize> = (0..importance.len()).filter(|&c| active[c]).collect();
    let k = (fraction * live.len() as f64).floor() as usize;
    if k == 0 || k >= live.len() {
        return Vec::new();
    }
    live.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]).then(a.cmp(&b)));
    let mut chosen = live[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutcome {
    pub masks: PruneMasks,
    pub pruned: BTreeMap<String, Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Deactivates channels layer by layer at the same rate and zeroes them.
pub fn prune_step<T: Real>(net: &mut ResidualNet<T>, masks: &PruneMasks, fraction: f64) -> Result<StepOutcome> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("prune fraction {fraction} outside (0, 1)")));
    }
    masks.check_against(net)?;
    let mut out = StepOutcome {
        masks: masks.clone(),
        ..Default::default()
    };
    for layer in net.prunable_layers() {
        let importance = channel_importance(net, masks, &layer.name)?;
        let mask = out
            .masks
            .layers
            .entry(layer.name.clone())
            .or_insert_with(|| vec![true; importance.len()]);
        let active = mask.iter().filter(|&&a| a).count();
        let want = (fraction * active as f64).floor() as usize;
        if want >= active {
            let msg = format!("{}: pruning {want} of {active} active channels would empty the layer; left untouched", layer.name);
            log::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        let chosen = select_channels(&importance, mask, fraction);
        for &c in &chosen {
            mask[c] = false;
        }
        if !chosen.is_empty() {
            out.pruned.insert(layer.name, chosen);
        }
    }
    out.masks.apply(net);
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Sparsity {
    pub overall: f64,
    pub per_layer: BTreeMap<String, f64>,
}

/// Fraction of exactly-zero weights over the prunable convolutions.
pub fn sparsity<T: Real>(net: &ResidualNet<T>) -> Sparsity {
    let mut zeros = 0usize;
    let mut total = 0usize;
    let mut per_layer = BTreeMap::new();
    for l in net.prunable_layers() {
        let w = net.tensor(l.conv.weight);
        let z = w.data().iter().filter(|v| **v == T::zero()).count();
        per_layer.insert(l.name, z as f64 / w.numel() as f64);
        zeros += z;
        total += w.numel();
    }
    Sparsity {
        overall: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        per_layer,
    }
}

/// A prunable conv described by its geometry only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub out_channels: usize,
    pub params_per_channel: usize,
}

impl LayerGeometry {
    pub fn of<T: Real>(net: &ResidualNet<T>) -> Vec<LayerGeometry> {
        net.prunable_layers()
            .iter()
            .map(|l| {
                let s = net.tensor(l.conv.weight).shape();
                LayerGeometry {
                    out_channels: s[0],
                    params_per_channel: s[1] * s[2] * s[3],
                }
            })
            .collect()
    }
}

/// Overall sparsity after each of `steps` prune steps (index 0 = unpruned),
/// computed from channel counts alone.
pub fn schedule_sparsity(layers: &[LayerGeometry], fraction: f64, steps: usize) -> Vec<f64> {
    let total: usize = layers.iter().map(|l| l.out_channels * l.params_per_channel).sum();
    let mut active: Vec<usize> = layers.iter().map(|l| l.out_channels).collect();
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        if step > 0 {
            for a in active.iter_mut() {
                let k = (fraction * *a as f64).floor() as usize;
                if k < *a {
                    *a -= k;
                }
            }
        }
        let zero: usize = layers
            .iter()
            .zip(&active)
            .map(|(l, &a)| (l.out_channels - a) * l.params_per_channel)
            .sum();
        out.push(zero as f64 / total as f64);
    }
    out
}
