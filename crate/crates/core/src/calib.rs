//! Post-hoc temperature heads: one global temperature, HnLTS (logits plus
//! normalised entropy) and a small MLP over penultimate features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax, softplus, Graph, Tensor, Var};
use crate::train::mean_std;

/// `softplus^-1(1)`: the raw value that yields a temperature of exactly one.
pub const UNIT_T_RAW: f64 = 0.541_324_854_612_918_1;
pub const ECE_BINS: usize = 15;
pub const ENTROPY_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Global,
    Hnlts,
    Mlp,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "hnlts" => Ok(Self::Hnlts),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!("unknown calibration head '{other}' (global, hnlts, mlp)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Hnlts => "hnlts",
            Self::Mlp => "mlp",
        }
    }
}

/// Every variant produces `T = softplus(raw)`, so temperatures stay positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum CalibrationHead {
    GlobalT {
        raw: f64,
    },
    HnLTS {
        w_l: Vec<f64>,
        w_h: f64,
        bias: f64,
    },
    FeatureMLP {
        hidden: usize,
        features: usize,
        /// Row-major `hidden x features`.
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

impl CalibrationHead {
    /// Global head with temperature `t`.
    pub fn global(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {t}")));
        }
        // softplus^-1(t) = ln(e^t - 1), written to survive large t.
        let raw = t + (-(-t).exp_m1()).ln();
        Ok(Self::GlobalT { raw })
    }

    /// Zero logit and entropy weights with the bias set for `T = 1`.
    pub fn hnlts(num_classes: usize) -> Self {
        Self::HnLTS {
            w_l: vec![0.0; num_classes],
            w_h: 0.0,
            bias: UNIT_T_RAW,
        }
    }

    /// Small uniform weights, output bias set for `T` close to 1.
    pub fn mlp(features: usize, hidden: usize, seed: u64) -> Result<Self> {
        if ![16, 32, 64].contains(&hidden) {
            return Err(Error::Config(format!("hidden width {hidden} not in {{16, 32, 64}}")));
        }
        if features == 0 {
            return Err(Error::Config("feature MLP needs at least one feature".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = 1.0 / (features as f64).sqrt();
        let w1 = (0..hidden * features).map(|_| rng.gen_range(-a1..a1)).collect();
        let w2 = (0..hidden).map(|_| rng.gen_range(-0.01..0.01)).collect();
        Ok(Self::FeatureMLP {
            hidden,
            features,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: UNIT_T_RAW,
        })
    }

    pub fn initial(kind: HeadKind, num_classes: usize, features: usize, hidden: usize, seed: u64) -> Result<Self> {
        match kind {
            HeadKind::Global => Self::global(1.0),
            HeadKind::Hnlts => Ok(Self::hnlts(num_classes)),
            HeadKind::Mlp => Self::mlp(features, hidden, seed),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Self::GlobalT { .. } => HeadKind::Global,
            Self::HnLTS { .. } => HeadKind::Hnlts,
            Self::FeatureMLP { .. } => HeadKind::Mlp,
        }
    }

    /// Per-sample temperature.
    pub fn temperature(&self, z: &[f64], phi: &[f64]) -> Result<f64> {
        let raw = match self {
            Self::GlobalT { raw } => *raw,
            Self::HnLTS { w_l, w_h, bias } => {
                if z.len() != w_l.len() {
                    return Err(Error::shape("hnlts temperature", &[z.len()], &[w_l.len()]));
                }
                let dot: f64 = w_l.iter().zip(z).map(|(w, v)| w * v).sum();
                dot + w_h * normalized_entropy(z).ln() + bias
            }
            Self::FeatureMLP {
                hidden,
                features,
                w1,
                b1,
                w2,
                b2,
            } => {
                if phi.len() != *features {
                    return Err(Error::shape("mlp temperature", &[phi.len()], &[*features]));
                }
                let mut out = *b2;
                for j in 0..*hidden {
                    let row = &w1[j * features..(j + 1) * features];
                    let a: f64 = row.iter().zip(phi).map(|(w, x)| w * x).sum::<f64>() + b1[j];
                    out += w2[j] * a.max(0.0);
                }
                out
            }
        };
        Ok(softplus(raw))
    }

    /// `softmax(z / T(x))`.
    pub fn calibrate_probs(&self, z: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let t = self.temperature(z, phi)?;
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        Ok(softmax(&scaled))
    }

    fn params(&self) -> Vec<Tensor<f64>> {
        let t = |shape: &[usize], data: Vec<f64>| Tensor::new(shape, data).expect("head parameter shape").with_grad();
        match self {
            Self::GlobalT { raw } => vec![t(&[1, 1], vec![*raw])],
            Self::HnLTS { w_l, w_h, bias } => {
                let mut w = w_l.clone();
                w.push(*w_h);
                vec![t(&[1, w_l.len() + 1], w), t(&[1], vec![*bias])]
            }
            Self::FeatureMLP {
                hidden,
                features,
                w1,
                b1,
                w2,
                b2,
            } => vec![
                t(&[*hidden, *features], w1.clone()),
                t(&[*hidden], b1.clone()),
                t(&[1, *hidden], w2.clone()),
                t(&[1], vec![*b2]),
            ],
        }
    }

    /// Indices into `params` of the weights that take L2 decay.
    fn decayed(&self) -> &'static [usize] {
        match self {
            Self::GlobalT { .. } => &[],
            Self::HnLTS { .. } => &[0],
            Self::FeatureMLP { .. } => &[0, 2],
        }
    }

    fn set_params(&mut self, p: &[Vec<f64>]) {
        match self {
            Self::GlobalT { raw } => *raw = p[0][0],
            Self::HnLTS { w_l, w_h, bias } => {
                let k = w_l.len();
                w_l.copy_from_slice(&p[0][..k]);
                *w_h = p[0][k];
                *bias = p[1][0];
            }
            Self::FeatureMLP { w1, b1, w2, b2, .. } => {
                w1.copy_from_slice(&p[0]);
                b1.copy_from_slice(&p[1]);
                w2.copy_from_slice(&p[2]);
                *b2 = p[3][0];
            }
        }
    }

    /// Builds the mean NLL of `softmax(z / T)` over `set` on a fresh graph.
    fn loss_graph(&self, set: &CalibSet) -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let n = set.len();
        let k = set.num_classes();
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = self.params().iter().map(|p| g.leaf(p)).collect();
        let z = g.input(Tensor::new(&[n, k], set.logits.concat())?);
        let raw = match self {
            Self::GlobalT { .. } => {
                let ones = g.input(Tensor::full(&[n, 1], 1.0));
                g.linear(ones, vars[0], None)?
            }
            Self::HnLTS { .. } => {
                let mut x = Vec::with_capacity(n * (k + 1));
                for row in &set.logits {
                    x.extend_from_slice(row);
                    x.push(normalized_entropy(row).ln());
                }
                let x = g.input(Tensor::new(&[n, k + 1], x)?);
                g.linear(x, vars[0], Some(vars[1]))?
            }
            Self::FeatureMLP { features, .. } => {
                if set.features.iter().any(|f| f.len() != *features) {
                    return Err(Error::shape("mlp features", &[n, *features], &[set.features.len()]));
                }
                let phi = g.input(Tensor::new(&[n, *features], set.features.concat())?);
                let h = g.linear(phi, vars[0], Some(vars[1]))?;
                let h = g.relu(h)?;
                g.linear(h, vars[2], Some(vars[3]))?
            }
        };
        let t = g.softplus(raw)?;
        let scaled = g.div_rows(z, t)?;
        let loss = g.softmax_cross_entropy(scaled, &set.labels)?;
        Ok((g, vars, loss))
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Entropy of `softmax(z)` over `ln K`, clamped to `[1e-8, 1]`.
pub fn normalized_entropy(z: &[f64]) -> f64 {
    let h = entropy(&softmax(z)) / (z.len() as f64).ln();
    h.clamp(ENTROPY_FLOOR, 1.0)
}

/// Logits, penultimate features and labels of a held-out set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibSet {
    pub logits: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl CalibSet {
    pub fn new(logits: Vec<Vec<f64>>, features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if logits.len() != labels.len() || features.len() != labels.len() {
            return Err(Error::shape("calibration set", &[logits.len(), features.len()], &[labels.len()]));
        }
        let k = logits.first().map_or(0, Vec::len);
        if logits.iter().any(|z| z.len() != k) {
            return Err(Error::Invalid("logit rows differ in length".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        Ok(Self { logits, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    pub fn feature_len(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            logits: idx.iter().map(|&i| self.logits[i].clone()).collect(),
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lr: f64,
    pub max_iters: usize,
    pub patience: usize,
    /// Smallest NLL drop that resets patience.
    pub min_delta: f64,
    /// Share of the fit set held back to pick the stopping point.
    pub holdout_frac: f64,
    /// L2 penalty on the head's weights (biases and the global T are exempt).
    pub weight_decay: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            max_iters: 2000,
            patience: 5,
            min_delta: 1e-7,
            holdout_frac: 0.2,
            weight_decay: 0.1,
        }
    }
}

/// Fitted head plus the monitored NLL trace, element 0 being the start.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub head: CalibrationHead,
    pub history: Vec<f64>,
    pub best_iter: usize,
}

/// Evenly spaced `floor(n * frac)` indices to monitor, and the rest to fit.
/// Falls back to monitoring the fit set when either side would be empty.
pub fn holdout_split(n: usize, frac: f64) -> (Vec<usize>, Vec<usize>) {
    let (mut fit_idx, mut held) = (Vec::new(), Vec::new());
    for i in 0..n {
        if ((i + 1) as f64 * frac).floor() > (i as f64 * frac).floor() {
            held.push(i);
        } else {
            fit_idx.push(i);
        }
    }
    if held.is_empty() || fit_idx.is_empty() {
        let all: Vec<usize> = (0..n).collect();
        return (all.clone(), all);
    }
    (fit_idx, held)
}

fn set_nll(head: &CalibrationHead, set: &CalibSet) -> Result<f64> {
    let probs = set
        .logits
        .iter()
        .zip(&set.features)
        .map(|(z, phi)| head.calibrate_probs(z, phi))
        .collect::<Result<Vec<_>>>()?;
    Ok(nll(&probs, &set.labels))
}

/// Full-batch Adam on the mean NLL of part of `set`, stopped on the NLL of
/// the held-back part. Returns the best monitored state, the initial one
/// included. A global temperature has no weights to overfit and uses the
/// whole set for both.
pub fn fit(head: &CalibrationHead, set: &CalibSet, cfg: &FitConfig) -> Result<FitOutcome> {
    if set.is_empty() {
        return Err(Error::Invalid("calibration fit needs a non-empty validation set".into()));
    }
    let frac = if head.decayed().is_empty() { 0.0 } else { cfg.holdout_frac };
    let (fit_idx, held_idx) = holdout_split(set.len(), frac);
    let (train, held) = (set.subset(&fit_idx), set.subset(&held_idx));
    let mut current = head.clone();
    let mut params: Vec<Vec<f64>> = current.params().into_iter().map(Tensor::into_data).collect();
    let mut m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut v = m.clone();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut best = (f64::INFINITY, head.clone(), 0);
    let mut history = Vec::new();
    let mut stale = 0;
    for it in 0..=cfg.max_iters {
        let monitored = set_nll(&current, &held)?;
        if !monitored.is_finite() {
            break;
        }
        history.push(monitored);
        if monitored < best.0 - cfg.min_delta {
            best = (monitored, current.clone(), it);
            stale = 0;
        } else {
            if monitored < best.0 {
                best = (monitored, current.clone(), it);
            }
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
        if it == cfg.max_iters {
            break;
        }
        let (mut g, vars, loss) = current.loss_graph(&train)?;
        g.backward(loss)?;
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decayed = current.decayed();
        for (i, var) in vars.iter().enumerate() {
            let grad = g.grad(*var)?;
            let wd = if decayed.contains(&i) { cfg.weight_decay } else { 0.0 };
            for j in 0..params[i].len() {
                let gj = grad[j] + wd * params[i][j];
                m[i][j] = b1 * m[i][j] + (1.0 - b1) * gj;
                v[i][j] = b2 * v[i][j] + (1.0 - b2) * gj * gj;
                params[i][j] -= cfg.lr * (m[i][j] / c1) / ((v[i][j] / c2).sqrt() + eps);
            }
        }
        current.set_params(&params);
    }
    Ok(FitOutcome {
        head: best.1,
        history,
        best_iter: best.2,
    })
}

/// Mean negative log-likelihood of the true labels.
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = probs.iter().zip(labels).map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln()).sum();
    total / labels.len().max(1) as f64
}

/// One equal-width confidence bin `(lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

pub fn reliability(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Vec<ReliabilityBin> {
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let c = p.iter().copied().fold(0.0, f64::max);
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        hits[b] += usize::from(argmax(p) == y);
    }
    (0..bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            ReliabilityBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: count[b],
                mean_confidence: conf[b] / n,
                accuracy: hits[b] as f64 / n,
            }
        })
        .collect()
}

/// Count-weighted mean gap between confidence and accuracy.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> f64 {
    let n = labels.len().max(1) as f64;
    reliability(probs, labels, bins)
        .iter()
        .map(|b| b.count as f64 / n * (b.mean_confidence - b.accuracy).abs())
        .sum()
}

pub fn confusion(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (p, &y) in probs.iter().zip(labels) {
        m[y][argmax(p)] += 1;
    }
    m
}

/// Calibration-quality numbers for one set of probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nll: f64,
    pub ece: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub bins: Vec<ReliabilityBin>,
}

impl Metrics {
    pub fn of(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Self {
        let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
        Self {
            nll: nll(probs, labels),
            ece: ece(probs, labels, ECE_BINS),
            accuracy: hits as f64 / labels.len().max(1) as f64,
            confusion: confusion(probs, labels, k),
            bins: reliability(probs, labels, ECE_BINS),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub repeat: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub pre: Metrics,
    pub post: Metrics,
    pub head: CalibrationHead,
}

/// `(validation, test)` sizes with `validation = round(n * frac)`.
pub fn split_sizes(n: usize, val_frac: f64) -> Result<(usize, usize)> {
    if !(0.0 < val_frac && val_frac < 1.0) {
        return Err(Error::Config(format!("val_frac {val_frac} outside (0, 1)")));
    }
    let val = (n as f64 * val_frac).round() as usize;
    Ok((val, n - val))
}

pub fn head_report(head: &CalibrationHead, set: &CalibSet) -> Result<(Metrics, Metrics)> {
    let k = set.num_classes();
    let raw: Vec<Vec<f64>> = set.logits.iter().map(|z| softmax(z)).collect();
    let cal = set
        .logits
        .iter()
        .zip(&set.features)
        .map(|(z, phi)| head.calibrate_probs(z, phi))
        .collect::<Result<Vec<_>>>()?;
    Ok((Metrics::of(&raw, &set.labels, k), Metrics::of(&cal, &set.labels, k)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub head: HeadKind,
    pub hidden: usize,
    pub val_frac: f64,
    pub repeats: usize,
    pub fit: FitConfig,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Hnlts,
            hidden: 32,
            val_frac: 0.25,
            repeats: 5,
            fit: FitConfig::default(),
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        split_sizes(1, self.val_frac)?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if ![16, 32, 64].contains(&self.hidden) {
            return Err(Error::Config(format!("hidden {} not in {{16, 32, 64}}", self.hidden)));
        }
        if !(self.fit.lr > 0.0) || self.fit.patience == 0 {
            return Err(Error::Config("fit needs lr > 0 and patience >= 1".into()));
        }
        if !(self.fit.weight_decay >= 0.0 && self.fit.weight_decay.is_finite()) {
            return Err(Error::Config(format!("fit.weight_decay {} must be finite and non-negative", self.fit.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.fit.holdout_frac) {
            return Err(Error::Config(format!("fit.holdout_frac {} outside [0, 1)", self.fit.holdout_frac)));
        }
        Ok(())
    }
}

/// Mean and population std of one metric across repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub pre_mean: f64,
    pub pre_std: f64,
    pub post_mean: f64,
    pub post_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStudy {
    pub head: HeadKind,
    pub reports: Vec<CalibrationReport>,
    pub summary: Vec<MetricSummary>,
}

/// Repeated random validation/test splits; each repeat fits a fresh head
/// on its validation part and scores it on the rest.
pub fn study(set: &CalibSet, cfg: &CalibConfig, seed: u64) -> Result<CalibrationStudy> {
    cfg.validate()?;
    let (n_val, _) = split_sizes(set.len(), cfg.val_frac)?;
    if n_val == 0 || n_val == set.len() {
        return Err(Error::Invalid(format!(
            "{} samples cannot be split at val_frac {}",
            set.len(),
            cfg.val_frac
        )));
    }
    let mut reports = Vec::with_capacity(cfg.repeats);
    for repeat in 0..cfg.repeats {
        let rseed = seed.wrapping_add(repeat as u64);
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(rseed));
        let (val_idx, test_idx) = order.split_at(n_val);
        let (val, test) = (set.subset(val_idx), set.subset(test_idx));
        let init = CalibrationHead::initial(cfg.head, set.num_classes(), set.feature_len(), cfg.hidden, rseed)?;
        let fitted = fit(&init, &val, &cfg.fit)?.head;
        let (pre, post) = head_report(&fitted, &test)?;
        reports.push(CalibrationReport {
            repeat,
            val_size: val.len(),
            test_size: test.len(),
            pre,
            post,
            head: fitted,
        });
    }
    let summarize = |name: &str, get: &dyn Fn(&Metrics) -> f64| {
        let pre: Vec<f64> = reports.iter().map(|r| get(&r.pre)).collect();
        let post: Vec<f64> = reports.iter().map(|r| get(&r.post)).collect();
        let (pre_mean, pre_std) = mean_std(&pre);
        let (post_mean, post_std) = mean_std(&post);
        MetricSummary {
            metric: name.to_string(),
            pre_mean,
            pre_std,
            post_mean,
            post_std,
        }
    };
    let summary = vec![
        summarize("accuracy", &|m| m.accuracy),
        summarize("nll", &|m| m.nll),
        summarize("ece", &|m| m.ece),
    ];
    Ok(CalibrationStudy {
        head: cfg.head,
        reports,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    /// Logits whose softmax is the sampling distribution of the label.
    fn calibrated_set(n: usize, seed: u64, scale: f64) -> CalibSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let z: Vec<f64> = (0..4).map(|_| 1.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            let p = softmax(&z);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut y = 3;
            for (c, pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    y = c;
                    break;
                }
            }
            labels.push(y);
            logits.push(z.iter().map(|v| v * scale).collect());
        }
        let features = vec![Vec::new(); n];
        CalibSet::new(logits, features, labels).unwrap()
    }

    fn grid_best_t(set: &CalibSet) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=1990 {
            let t = 0.05 + i as f64 * 0.005;
            let probs: Vec<Vec<f64>> = set
                .logits
                .iter()
                .map(|z| softmax(&z.iter().map(|v| v / t).collect::<Vec<_>>()))
                .collect();
            let l = nll(&probs, &set.labels);
            if l < best.0 {
                best = (l, t);
            }
        }
        best.1
    }

    #[test]
    fn zero_hnlts_gives_ln2() {
        let head = CalibrationHead::HnLTS {
            w_l: vec![0.0; 4],
            w_h: 0.0,
            bias: 0.0,
        };
        let t = head.temperature(&[0.3, -1.0, 2.0, 0.5], &[]).unwrap();
        assert!((t - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_drop_entropy_term() {
        let z = [0.7; 4];
        assert_eq!(normalized_entropy(&z), 1.0);
        let a = CalibrationHead::HnLTS {
            w_l: vec![0.1, -0.2, 0.3, 0.05],
            w_h: 5.0,
            bias: 0.0,
        };
        let b = CalibrationHead::HnLTS {
            w_l: vec![0.1, -0.2, 0.3, 0.05],
            w_h: -3.0,
            bias: 0.0,
        };
        assert!((a.temperature(&z, &[]).unwrap() - b.temperature(&z, &[]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hnlts_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let w_l: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w_h = rng.gen_range(-1.0..1.0);
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let head = CalibrationHead::HnLTS {
                w_l: w_l.clone(),
                w_h,
                bias: 0.0,
            };
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let h: f64 = e.iter().map(|v| -(v / s) * (v / s).ln()).sum::<f64>() / 4f64.ln();
            let raw = w_l.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + w_h * h.clamp(1e-8, 1.0).ln();
            let oracle = (1.0 + raw.exp()).ln();
            assert!((head.temperature(&z, &[]).unwrap() - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(CalibrationHead::hnlts(4).temperature(&[1.0, 2.0], &[]).is_err());
        let mlp = CalibrationHead::mlp(8, 16, 0).unwrap();
        assert!(mlp.temperature(&[0.0; 4], &[0.0; 7]).is_err());
        assert!(CalibrationHead::mlp(8, 20, 0).is_err());
    }

    #[test]
    fn unit_temperature_is_identity() {
        let head = CalibrationHead::global(1.0).unwrap();
        let z = [2.0, -1.0, 0.5, 0.0];
        let p = head.calibrate_probs(&z, &[]).unwrap();
        for (a, b) in p.iter().zip(softmax(&z)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((CalibrationHead::hnlts(4).temperature(&z, &[]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn temperature_two_hand_values() {
        let head = CalibrationHead::global(2.0).unwrap();
        let p = head.calibrate_probs(&[2.0, 0.0, 0.0, 0.0], &[]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 3.0)).abs() < 1e-12);
        assert!((p[0] - 0.4754).abs() < 1e-4 && (p[1] - 0.1749).abs() < 1e-4);
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let head = CalibrationHead::global(1e6).unwrap();
        let p = head.calibrate_probs(&[9.0, -3.0, 1.0, 4.0], &[]).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-5));
    }

    #[test]
    fn graph_loss_matches_scalar_path() {
        let set = calibrated_set(40, 1, 1.0);
        let mut set_f = set.clone();
        set_f.features = (0..40).map(|i| (0..6).map(|j| ((i * 7 + j) % 5) as f64 * 0.3).collect()).collect();
        let heads = [
            CalibrationHead::global(1.7).unwrap(),
            CalibrationHead::HnLTS {
                w_l: vec![0.1, 0.2, -0.1, 0.3],
                w_h: 0.4,
                bias: 0.2,
            },
            CalibrationHead::mlp(6, 16, 3).unwrap(),
        ];
        for head in heads {
            let (g, _, loss) = head.loss_graph(&set_f).unwrap();
            let (_, post) = head_report(&head, &set_f).unwrap();
            assert!((g.value(loss).data()[0] - post.nll).abs() < 1e-10, "{:?}", head.kind());
        }
    }

    #[test]
    fn global_recovers_threefold_overconfidence() {
        let set = calibrated_set(400, 2, 3.0);
        let fitted = fit(&CalibrationHead::global(1.0).unwrap(), &set, &FitConfig::default()).unwrap();
        let t = fitted.head.temperature(&[0.0; 4], &[]).unwrap();
        let oracle = grid_best_t(&set);
        assert!((t - oracle).abs() < 0.05, "fit {t} grid {oracle}");
        assert!((t - 3.0).abs() < 0.3, "{t}");
    }

    #[test]
    fn calibrated_logits_stay_near_one() {
        let set = calibrated_set(400, 3, 1.0);
        let fitted = fit(&CalibrationHead::global(1.0).unwrap(), &set, &FitConfig::default()).unwrap();
        let t = fitted.head.temperature(&[0.0; 4], &[]).unwrap();
        assert!((t - grid_best_t(&set)).abs() < 0.05);
        assert!((t - 1.0).abs() < 0.2);
    }

    #[test]
    fn holdout_is_evenly_spaced() {
        let (fit_idx, held) = holdout_split(10, 0.2);
        assert_eq!(held, vec![4, 9]);
        assert_eq!(fit_idx.len(), 8);
        assert_eq!(holdout_split(3, 0.2).1, vec![0, 1, 2]);
        assert_eq!(holdout_split(4, 0.0).0, holdout_split(4, 0.0).1);
    }

    #[test]
    fn fit_never_worse_than_start() {
        for seed in 0..4 {
            let set = calibrated_set(99, 10 + seed, 2.0);
            let init = CalibrationHead::hnlts(4);
            let out = fit(&init, &set, &FitConfig::default()).unwrap();
            assert!(out.history[out.best_iter] <= out.history[0] + 1e-12);
            let (_, held) = holdout_split(set.len(), FitConfig::default().holdout_frac);
            let (pre, _) = head_report(&init, &set.subset(&held)).unwrap();
            assert!((out.history[0] - pre.nll).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_fit_rejected() {
        assert!(fit(&CalibrationHead::global(1.0).unwrap(), &CalibSet::default(), &FitConfig::default()).is_err());
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(396, 0.25).unwrap(), (99, 297));
        assert!(split_sizes(10, 1.0).is_err());
    }

    #[test]
    fn calibrated_sampler_has_small_ece() {
        let set = calibrated_set(20_000, 4, 1.0);
        let probs: Vec<Vec<f64>> = set.logits.iter().map(|z| softmax(z)).collect();
        let bins = reliability(&probs, &set.labels, ECE_BINS);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 20_000);
        let e = ece(&probs, &set.labels, ECE_BINS);
        assert!(e < 0.02, "{e}");
    }

    #[test]
    fn identity_head_leaves_metrics_unchanged() {
        let set = calibrated_set(200, 5, 2.0);
        let (pre, post) = head_report(&CalibrationHead::global(1.0).unwrap(), &set).unwrap();
        assert!((pre.nll - post.nll).abs() < 1e-12);
        assert_eq!(pre.ece, post.ece);
        assert_eq!(pre.confusion, post.confusion);
    }

    #[test]
    fn study_shapes_and_confusion_rows() {
        let set = calibrated_set(120, 6, 2.5);
        let cfg = CalibConfig {
            head: HeadKind::Global,
            repeats: 3,
            ..CalibConfig::default()
        };
        let st = study(&set, &cfg, 9).unwrap();
        assert_eq!(st.reports.len(), 3);
        for r in &st.reports {
            assert_eq!((r.val_size, r.test_size), (30, 90));
            let rows: usize = r.post.confusion.iter().flatten().sum();
            assert_eq!(rows, 90);
            assert_eq!(r.pre.accuracy, r.post.accuracy);
        }
        assert_eq!(st, study(&set, &cfg, 9).unwrap());
    }

    #[test]
    fn mlp_fit_runs_and_improves() {
        let mut set = calibrated_set(120, 7, 3.0);
        set.features = set.logits.iter().map(|z| z.iter().map(|v| v.abs()).collect()).collect();
        let out = fit(&CalibrationHead::mlp(4, 16, 1).unwrap(), &set, &FitConfig::default()).unwrap();
        assert!(out.history.iter().cloned().fold(f64::INFINITY, f64::min) < out.history[0]);
    }
}
