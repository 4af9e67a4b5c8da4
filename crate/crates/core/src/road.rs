//! Remove-and-debias evaluation of attribution maps: ranked pixel removal,
//! noisy linear imputation, and the combined MoRF/LeRF score.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::model::ResidualNet;
use crate::tensor::{argmax, softmax, Tensor};

pub const DIRECT_WEIGHT: f64 = 1.0 / 6.0;
pub const DIAGONAL_WEIGHT: f64 = 1.0 / 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Most relevant first.
    MoRF,
    /// Least relevant first.
    LeRF,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadConfig {
    /// Percent of in-mask pixels removed at each evaluation point.
    pub thresholds: Vec<f64>,
    pub sigma: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![20.0, 40.0, 60.0, 80.0],
            sigma: 0.01,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl RoadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(0.0..100.0).contains(t)) {
            return Err(Error::Config("thresholds must be non-empty and within [0, 100)".into()));
        }
        if !(self.sigma >= 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::Config("sigma must be >= 0 and tolerance > 0".into()));
        }
        Ok(())
    }
}

/// In-mask pixels (row-major plane indices) to remove: the top or bottom
/// `round(theta / 100 * n)` by attribution, ties by lower index.
pub fn rank_and_remove(map: &[f64], valid: &[bool], theta: f64, strategy: Strategy) -> Result<Vec<usize>> {
    if map.len() != valid.len() {
        return Err(Error::shape("rank_and_remove", &[map.len()], &[valid.len()]));
    }
    let mut inside: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if inside.is_empty() {
        return Err(Error::Invalid("valid mask is empty".into()));
    }
    let count = (theta / 100.0 * inside.len() as f64 + 0.5).floor() as usize;
    let count = count.min(inside.len());
    match strategy {
        Strategy::MoRF => inside.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b))),
        Strategy::LeRF => inside.sort_by(|&a, &b| map[a].total_cmp(&map[b]).then(a.cmp(&b))),
    }
    inside.truncate(count);
    Ok(inside)
}

/// Symmetric positive definite neighbour system over the removed pixels:
/// `S_i x_i - sum_{j in M} w_ij x_j = sum_{k not in M} w_ik v_k`, where `S_i`
/// sums the weights of neighbours inside the image.
pub struct ImputationSystem {
    pixels: Vec<usize>,
    diag: Vec<f64>,
    /// Off-diagonal couplings `(unknown index, weight)`.
    coupled: Vec<Vec<(usize, f64)>>,
    /// Known neighbours `(plane index, weight)`.
    known: Vec<Vec<(usize, f64)>>,
}

const NEIGHBOURS: [(isize, isize, f64); 8] = [
    (-1, 0, DIRECT_WEIGHT),
    (1, 0, DIRECT_WEIGHT),
    (0, -1, DIRECT_WEIGHT),
    (0, 1, DIRECT_WEIGHT),
    (-1, -1, DIAGONAL_WEIGHT),
    (-1, 1, DIAGONAL_WEIGHT),
    (1, -1, DIAGONAL_WEIGHT),
    (1, 1, DIAGONAL_WEIGHT),
];

impl ImputationSystem {
    pub fn new(size: usize, pixels: &[usize]) -> Result<Self> {
        let mut slot = vec![usize::MAX; size * size];
        for (u, &p) in pixels.iter().enumerate() {
            if p >= size * size || slot[p] != usize::MAX {
                return Err(Error::Invalid(format!("pixel {p} out of range or repeated")));
            }
            slot[p] = u;
        }
        let n = pixels.len();
        let (mut diag, mut coupled, mut known) = (vec![0.0; n], vec![Vec::new(); n], vec![Vec::new(); n]);
        for (u, &p) in pixels.iter().enumerate() {
            let (r, c) = ((p / size) as isize, (p % size) as isize);
            for (dr, dc, w) in NEIGHBOURS {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= size as isize || cc >= size as isize {
                    continue;
                }
                let q = rr as usize * size + cc as usize;
                diag[u] += w;
                match slot[q] {
                    usize::MAX => known[u].push((q, w)),
                    v => coupled[u].push((v, w)),
                }
            }
        }
        Ok(Self {
            pixels: pixels.to_vec(),
            diag,
            coupled,
            known,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for u in 0..x.len() {
            out[u] = self.diag[u] * x[u] - self.coupled[u].iter().map(|&(v, w)| w * x[v]).sum::<f64>();
        }
    }

    pub fn rhs(&self, plane: &[f64]) -> Vec<f64> {
        self.known
            .iter()
            .map(|k| k.iter().map(|&(q, w)| w * plane[q]).sum())
            .collect()
    }

    /// Dense matrix, row-major `n x n`, for direct-solve comparisons.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut a = vec![0.0; n * n];
        for u in 0..n {
            a[u * n + u] = self.diag[u];
            for &(v, w) in &self.coupled[u] {
                a[u * n + v] -= w;
            }
        }
        a
    }

    /// Jacobi-preconditioned conjugate gradient; stops once `||b - Ax||_2`
    /// falls below `tol`, fails after `10 n` iterations.
    pub fn solve(&self, b: &[f64], tol: f64) -> Result<Vec<f64>> {
        let n = self.len();
        let mut x: Vec<f64> = b.iter().zip(&self.diag).map(|(bi, d)| bi / d).collect();
        let mut ax = vec![0.0; n];
        self.apply(&x, &mut ax);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(ri, d)| ri / d).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let limit = 10 * n.max(1);
        let mut ap = vec![0.0; n];
        for _ in 0..limit {
            if norm(&r) < tol {
                return Ok(x);
            }
            self.apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] / self.diag[i];
            }
            let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let residual = norm(&r);
        if residual < tol {
            return Ok(x);
        }
        Err(Error::NoConvergence {
            iterations: limit,
            residual,
        })
    }
}

/// Re-fills `pixels` in every channel of a channel-major image, then adds
/// `sigma * N(0, 1)` noise to the filled values.
pub fn impute(image: &[f32], size: usize, pixels: &[usize], sigma: f64, seed: u64, tol: f64) -> Result<Vec<f32>> {
    let plane = size * size;
    if image.len() != 3 * plane {
        return Err(Error::shape("impute", &[3, size, size], &[image.len()]));
    }
    let mut out = image.to_vec();
    if pixels.is_empty() {
        return Ok(out);
    }
    let sys = ImputationSystem::new(size, pixels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ch in 0..3 {
        let chan: Vec<f64> = image[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let x = sys.solve(&sys.rhs(&chan), tol)?;
        for (&p, v) in pixels.iter().zip(x) {
            let noise: f64 = if sigma > 0.0 { sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng) } else { 0.0 };
            out[ch * plane + p] = (v + noise) as f32;
        }
    }
    Ok(out)
}

/// Anything that maps channel-major images to class probabilities.
pub trait Classifier {
    fn input_size(&self) -> usize;
    fn probabilities(&self, images: &[Vec<f32>]) -> Result<Vec<Vec<f64>>>;
}

impl Classifier for ResidualNet<f32> {
    fn input_size(&self) -> usize {
        self.config().input_size
    }

    fn probabilities(&self, images: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let s = self.input_size();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let data: Vec<f32> = chunk.iter().flat_map(|i| i.iter().copied()).collect();
            let logits = self.logits(&Tensor::new(&[chunk.len(), 3, s, s], data)?)?;
            let k = self.config().num_classes;
            out.extend(logits.data().chunks(k).map(|row| {
                let z: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                softmax(&z)
            }));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadScore {
    pub class: usize,
    pub base: f64,
    pub thresholds: Vec<f64>,
    pub morf: Vec<f64>,
    pub lerf: Vec<f64>,
    /// `mean_theta (f_LeRF - f_MoRF) / 2`; higher is better.
    pub combined: f64,
}

/// Scores one attribution map on one image. `seed` drives the imputation
/// noise, derived per threshold and ordering.
pub fn road_combined<C: Classifier>(
    model: &C,
    image: &[f32],
    valid: &[bool],
    map: &[f64],
    cfg: &RoadConfig,
    seed: u64,
) -> Result<RoadScore> {
    cfg.validate()?;
    let size = model.input_size();
    let mut batch = vec![image.to_vec()];
    for (t, &theta) in cfg.thresholds.iter().enumerate() {
        for (s, strategy) in [Strategy::MoRF, Strategy::LeRF].into_iter().enumerate() {
            let removed = rank_and_remove(map, valid, theta, strategy)?;
            let task_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((t as u64) << 8 | s as u64);
            batch.push(impute(image, size, &removed, cfg.sigma, task_seed, cfg.tolerance)?);
        }
    }
    let probs = model.probabilities(&batch)?;
    let class = argmax(&probs[0]);
    let f = |i: usize| probs[i][class];
    let n = cfg.thresholds.len();
    let morf: Vec<f64> = (0..n).map(|t| f(1 + 2 * t)).collect();
    let lerf: Vec<f64> = (0..n).map(|t| f(2 + 2 * t)).collect();
    let combined = morf.iter().zip(&lerf).map(|(m, l)| (l - m) / 2.0).sum::<f64>() / n as f64;
    Ok(RoadScore {
        class,
        base: f(0),
        thresholds: cfg.thresholds.clone(),
        morf,
        lerf,
        combined,
    })
}

/// Mean score per class and method. Classes without samples are omitted.
pub fn category_breakdown(rows: &[(usize, String, f64)]) -> BTreeMap<usize, BTreeMap<String, f64>> {
    let mut acc: BTreeMap<usize, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for (class, method, score) in rows {
        let e = acc.entry(*class).or_default().entry(method.clone()).or_insert((0.0, 0));
        e.0 += score;
        e.1 += 1;
    }
    for c in 0..NUM_CLASSES {
        if !acc.contains_key(&c) {
            log::warn!("class {c} has no ROAD scores; omitted from the breakdown");
        }
    }
    acc.into_iter()
        .map(|(c, m)| (c, m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()))
        .collect()
}
