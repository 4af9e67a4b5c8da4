//! Cross-entropy training with Adam, early stopping and k-fold driving.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, stratified_kfold, to_batch, AugmentPlan, FoldPlan, LabeledImage, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, NetConfig, ResidualNet, TensorKind};
use crate::prune::PruneMasks;
use crate::tensor::{argmax, Graph, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        // lr = 0 is allowed as a frozen-parameter diagnostic
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}

/// A preprocessed training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub pixels: Vec<f32>,
    pub mask: Vec<bool>,
    pub label: usize,
}

impl Example {
    pub fn from_image(img: &LabeledImage) -> Result<Self> {
        Ok(Self {
            id: img.id.clone(),
            pixels: preprocess(&img.pixels, img.size)?.pixels,
            mask: img.valid_mask.clone(),
            label: img.label,
        })
    }
}

pub type Confusion = [[usize; NUM_CLASSES]; NUM_CLASSES];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    /// Rows are true classes, columns predictions.
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

struct Adam<T: Real> {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Adam<T> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &ResidualNet<T>) -> Self {
        let zeros: Vec<Vec<f64>> = net.tensors().iter().map(|t| vec![0.0; t.tensor.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            _marker: std::marker::PhantomData,
        }
    }

    /// One step with the L2 term `weight_decay * w` added to each gradient.
    fn step(&mut self, net: &mut ResidualNet<T>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, nt) in net.tensors_mut().iter_mut().enumerate() {
            if nt.kind != TensorKind::Param {
                continue;
            }
            let Some(grad) = nt.tensor.grad.take() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in nt.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j].as_f64() + weight_decay * w.as_f64();
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g * g;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
                *w = T::from_f64(w.as_f64() - update);
            }
            nt.tensor.grad = Some(grad);
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rand::RngCore::next_u64(&mut rng)
}

/// Eval-mode accuracy and confusion matrix.
pub fn evaluate(net: &ResidualNet<f32>, examples: &[&Example]) -> Result<(f64, Confusion)> {
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    let size = net.config().input_size;
    for chunk in examples.chunks(64) {
        let pixels: Vec<&[f32]> = chunk.iter().map(|e| e.pixels.as_slice()).collect();
        let logits = net.logits(&to_batch(&pixels, size)?)?;
        let k = net.config().num_classes;
        for (row, ex) in logits.data().chunks(k).zip(chunk) {
            let z: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            confusion[ex.label][argmax(&z).min(NUM_CLASSES - 1)] += 1;
        }
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Ok((correct as f64 / examples.len().max(1) as f64, confusion))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: ResidualNet<f32>,
    pub result: FoldResult,
    pub log: Vec<EpochLog>,
}

/// Trains until validation accuracy stalls for `patience` epochs and returns
/// the parameters from the best epoch (earliest on ties). With `masks`,
/// inactive channels stay exactly zero throughout.
pub fn train_one(
    net: &ResidualNet<f32>,
    train: &[&Example],
    val: &[&Example],
    cfg: &TrainConfig,
    masks: Option<&PruneMasks>,
    fold: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    let size = net.config().input_size;
    let mut net = net.clone();
    if let Some(m) = masks {
        m.apply(&mut net);
    }
    let mut adam = Adam::new(&net);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ResidualNet<f32>, Confusion)> = None;
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut pixels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = train[i];
                if cfg.augment {
                    let plan = AugmentPlan::sample(mix(cfg.seed, epoch as u64, 1 + i as u64));
                    pixels.push(plan.apply(&ex.pixels, &ex.mask, size).0);
                } else {
                    pixels.push(ex.pixels.clone());
                }
            }
            let refs: Vec<&[f32]> = pixels.iter().map(Vec::as_slice).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.input(to_batch(&refs, size)?);
            let dropout_seed = mix(cfg.seed, epoch as u64, (1 << 40) + b as u64);
            let trace = net
                .forward(&mut g, &bound, x, ForwardMode::train(dropout_seed))
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence { epoch },
                    other => other,
                })?;
            let loss = g.softmax_cross_entropy(trace.logits, &labels).map_err(|_| Error::Divergence { epoch })?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += lv * chunk.len() as f64;
            g.backward(loss)?;
            net.collect_grads(&g, &bound);
            if let Some(m) = masks {
                m.mask_grads(&mut net);
            }
            adam.step(&mut net, cfg.lr, cfg.weight_decay);
            if let Some(m) = masks {
                m.apply(&mut net);
            }
            net.update_running_stats(&trace.bn_stats);
        }
        let (acc, confusion) = evaluate(&net, val)?;
        let train_loss = loss_sum / train.len() as f64;
        log::debug!("fold {fold} epoch {epoch}: loss {train_loss:.4} val_acc {acc:.4}");
        log.push(EpochLog {
            fold,
            epoch,
            train_loss,
            val_acc: acc,
        });
        if best.as_ref().is_none_or(|(b, ..)| acc > *b) {
            best = Some((acc, epoch, net.clone(), confusion));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_val_acc, best_epoch, mut best_net, confusion) = best.expect("at least one epoch ran");
    for t in best_net.tensors_mut() {
        t.tensor.grad = None;
    }
    Ok(TrainOutcome {
        net: best_net,
        result: FoldResult {
            fold,
            best_val_acc,
            best_epoch,
            confusion,
        },
        log,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<TrainOutcome>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub best_fold: usize,
}

impl CvOutcome {
    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.result.best_val_acc).collect()
    }
}

/// Summary over folds; the best fold is the first with the top accuracy.
pub fn summarize(accs: &[f64]) -> (f64, f64, usize) {
    let (mean, std) = mean_std(accs);
    let best = accs
        .iter()
        .enumerate()
        .fold(0, |b, (i, &a)| if a > accs[b] { i } else { b });
    (mean, std, best)
}

/// Stratified k-fold training; fold `f` uses seed `seed + f` for both
/// initialization and training draws.
pub fn cross_validate(examples: &[Example], k: usize, net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<CvOutcome> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let plan = stratified_kfold(&labels, k, cfg.seed)?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let seed = cfg.seed.wrapping_add(fold as u64);
        let net = ResidualNet::build(net_cfg, seed)?;
        let train: Vec<&Example> = plan.train_indices(fold).into_iter().map(|i| &examples[i]).collect();
        let val: Vec<&Example> = plan.val_indices(fold).into_iter().map(|i| &examples[i]).collect();
        let fold_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let out = train_one(&net, &train, &val, &fold_cfg, None, fold)?;
        log::info!(
            "fold {fold}: best val acc {:.4} at epoch {}",
            out.result.best_val_acc,
            out.result.best_epoch
        );
        folds.push(out);
    }
    let accs: Vec<f64> = folds.iter().map(|f| f.result.best_val_acc).collect();
    let (mean_acc, std_acc, best_fold) = summarize(&accs);
    Ok(CvOutcome {
        plan,
        folds,
        mean_acc,
        std_acc,
        best_fold,
    })
}
