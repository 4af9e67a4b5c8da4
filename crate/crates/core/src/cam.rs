//! Class activation maps over a hooked feature map of the residual net.
//!
//! The weight rules are pure functions of the captured activations `A`
//! (`C x h x w`) and gradients `dY/dA`, so they can be checked analytically;
//! the net-facing wrappers only handle capture, upsampling and normalization.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardMode, Intervention, ResidualNet};
use crate::tensor::{argmax, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CamMethod {
    GradCam,
    GradCamPlusPlus,
    EigenCam,
    AblationCam,
    RandomCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 5] = [
        CamMethod::GradCam,
        CamMethod::GradCamPlusPlus,
        CamMethod::EigenCam,
        CamMethod::AblationCam,
        CamMethod::RandomCam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CamMethod::GradCam => "grad_cam",
            CamMethod::GradCamPlusPlus => "grad_cam_pp",
            CamMethod::EigenCam => "eigen_cam",
            CamMethod::AblationCam => "ablation_cam",
            CamMethod::RandomCam => "random_cam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown CAM method `{s}`")))
    }
}

/// Per-pixel attribution in `[0, 1]`, row-major `size x size`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Vec<f64>,
    pub size: usize,
    pub target_class: usize,
    pub method: CamMethod,
}

/// Activations (and optionally gradients) captured at the hook point.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub acts: Vec<f64>,
    pub grads: Option<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl Capture {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn grads(&self) -> Result<&[f64]> {
        self.grads
            .as_deref()
            .ok_or_else(|| Error::Invalid("gradients were not captured at the hook".into()))
    }
}

/// `alpha_k` = spatial mean of `dY/dA_k`.
pub fn grad_cam_weights(channels: usize, grads: &[f64]) -> Vec<f64> {
    let plane = grads.len() / channels;
    grads.chunks(plane).map(|g| g.iter().sum::<f64>() / plane as f64).collect()
}

/// Closed-form second-order weights:
/// `a = g^2 / (2 g^2 + sum(A_k) g^3 + 1e-8)`, `w_k = sum(a * relu(g))`.
pub fn grad_cam_pp_weights(channels: usize, acts: &[f64], grads: &[f64]) -> Vec<f64> {
    let plane = grads.len() / channels;
    (0..channels)
        .map(|k| {
            let a = &acts[k * plane..(k + 1) * plane];
            let g = &grads[k * plane..(k + 1) * plane];
            let total: f64 = a.iter().sum();
            g.iter()
                .map(|&gi| {
                    if gi == 0.0 {
                        return 0.0;
                    }
                    let g2 = gi * gi;
                    let alpha = g2 / (2.0 * g2 + total * g2 * gi + 1e-8);
                    alpha * gi.max(0.0)
                })
                .sum()
        })
        .collect()
}

/// `relu(sum_k w_k A_k)` on the hook grid.
pub fn weighted_map(channels: usize, acts: &[f64], weights: &[f64]) -> Vec<f64> {
    let plane = acts.len() / channels;
    let mut out = vec![0.0; plane];
    for (k, w) in weights.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(&acts[k * plane..(k + 1) * plane]) {
            *o += w * a;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Projection onto the top right singular vector of the `C x hw` activation
/// matrix, signed so the mean is non-negative. All-zero input gives zeros.
pub fn eigen_cam_map(channels: usize, acts: &[f64]) -> Vec<f64> {
    let plane = acts.len() / channels;
    if acts.iter().all(|&v| v == 0.0) {
        return vec![0.0; plane];
    }
    let m = DMatrix::from_row_slice(channels, plane, acts);
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let top = svd
        .singular_values
        .iter()
        .enumerate()
        .fold(0, |b, (i, &s)| if s > svd.singular_values[b] { i } else { b });
    let sigma = svd.singular_values[top];
    let mut map: Vec<f64> = vt.row(top).iter().map(|v| v * sigma).collect();
    if map.iter().sum::<f64>() < 0.0 {
        map.iter_mut().for_each(|v| *v = -*v);
    }
    map
}

/// `(Y_c - Y_c^k) / (|Y_c| + 1e-8)` for each ablated channel's score.
pub fn ablation_weights(score: f64, ablated: &[f64]) -> Vec<f64> {
    ablated.iter().map(|&yk| (score - yk) / (score.abs() + 1e-8)).collect()
}

pub fn random_weights(channels: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..channels).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let src = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = src(r, h, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = src(c, w, out_w);
            let top = map[r0 * w + c0] * (1.0 - fc) + map[r0 * w + c1] * fc;
            let bot = map[r1 * w + c0] * (1.0 - fc) + map[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

/// Min-max to `[0, 1]`; a (numerically) constant map becomes all zeros.
pub fn normalize(map: &mut [f64]) {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
        map.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    map.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

#[derive(Clone, Debug, Default)]
pub struct CamOptions {
    /// Hook unit name (`stem`, `layer1.0`, ...); defaults to the last block.
    pub target: Option<String>,
    /// Explained class; defaults to the predicted class.
    pub class: Option<usize>,
    /// Random-CAM seed.
    pub seed: u64,
}

fn image_batch(net: &ResidualNet<f32>, image: &[f32]) -> Result<Tensor<f32>> {
    let s = net.config().input_size;
    Tensor::new(&[1, 3, s, s], image.to_vec())
}

fn hook_unit(net: &ResidualNet<f32>, target: Option<&str>) -> Result<usize> {
    match target {
        Some(name) => net.unit_index(name),
        None => Ok(net.last_conv_unit()),
    }
}

/// Eval-mode activations at `unit` and, with `class`, gradients of that
/// class logit with respect to them.
pub fn capture(net: &ResidualNet<f32>, image: &[f32], unit: usize, class: Option<usize>) -> Result<Capture> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let x = g.input(image_batch(net, image)?);
    let trace = net.forward(&mut g, &bound, x, ForwardMode::eval())?;
    let a = g.value(trace.unit_outputs[unit]).clone();
    let logits: Vec<f64> = g.value(trace.logits).to_f64_vec();
    let (channels, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let grads = match class {
        None => None,
        Some(c) => {
            if c >= logits.len() {
                return Err(Error::Invalid(format!("class {c} out of range")));
            }
            let mut hg = Graph::new();
            let hb = net.bind(&mut hg, false);
            let leaf = hg.leaf(&a.clone().with_grad());
            let t = net.forward_from(&mut hg, &hb, leaf, unit + 1, ForwardMode::eval(), None)?;
            let y = hg.select_class(t.logits, c)?;
            let y = hg.sum(y)?;
            hg.backward(y)?;
            Some(hg.grad(leaf)?.iter().map(|&v| v as f64).collect())
        }
    };
    Ok(Capture {
        channels,
        h,
        w,
        acts: a.to_f64_vec(),
        grads,
        logits,
    })
}

/// Class scores after zeroing each channel of the hooked activation in turn,
/// evaluated by re-running only the layers after the hook.
pub fn ablated_scores(net: &ResidualNet<f32>, cap: &Capture, unit: usize, class: usize) -> Result<Vec<f64>> {
    let plane = cap.plane();
    let mut out = Vec::with_capacity(cap.channels);
    for start in (0..cap.channels).step_by(64) {
        let end = (start + 64).min(cap.channels);
        let mut data = Vec::with_capacity((end - start) * cap.acts.len());
        for k in start..end {
            let mut a: Vec<f32> = cap.acts.iter().map(|&v| v as f32).collect();
            a[k * plane..(k + 1) * plane].iter_mut().for_each(|v| *v = 0.0);
            data.extend(a);
        }
        let batch = Tensor::new(&[end - start, cap.channels, cap.h, cap.w], data)?;
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false);
        let x = g.input(batch);
        let t = net.forward_from(&mut g, &bound, x, unit + 1, ForwardMode::eval(), None)?;
        let k = net.config().num_classes;
        out.extend(g.value(t.logits).data().chunks(k).map(|row| row[class] as f64));
    }
    Ok(out)
}

/// Same scores via a full forward from the image with the channel zeroed in
/// place at the hook.
pub fn ablated_scores_full(net: &ResidualNet<f32>, image: &[f32], unit: usize, class: usize, channels: usize) -> Result<Vec<f64>> {
    (0..channels)
        .map(|k| {
            let edit = move |t: &mut Tensor<f32>| {
                let plane = t.shape()[2] * t.shape()[3];
                t.data_mut()[k * plane..(k + 1) * plane].iter_mut().for_each(|v| *v = 0.0);
            };
            let mut g = Graph::new();
            let bound = net.bind(&mut g, false);
            let x = g.input(image_batch(net, image)?);
            let iv = Intervention { unit, edit: &edit };
            let t = net.forward_from(&mut g, &bound, x, 0, ForwardMode::eval(), Some(&iv))?;
            Ok(g.value(t.logits).data()[class] as f64)
        })
        .collect()
}

/// Raw hook-grid map and explained class for one method.
pub fn raw_map(net: &ResidualNet<f32>, image: &[f32], method: CamMethod, opts: &CamOptions) -> Result<(Vec<f64>, Capture, usize)> {
    let unit = hook_unit(net, opts.target.as_deref())?;
    let needs_grad = matches!(method, CamMethod::GradCam | CamMethod::GradCamPlusPlus);
    let class = match opts.class {
        Some(c) => c,
        None => argmax(&capture(net, image, unit, None)?.logits),
    };
    let cap = capture(net, image, unit, needs_grad.then_some(class))?;
    let c = cap.channels;
    let map = match method {
        CamMethod::GradCam => weighted_map(c, &cap.acts, &grad_cam_weights(c, cap.grads()?)),
        CamMethod::GradCamPlusPlus => weighted_map(c, &cap.acts, &grad_cam_pp_weights(c, &cap.acts, cap.grads()?)),
        CamMethod::EigenCam => eigen_cam_map(c, &cap.acts),
        CamMethod::AblationCam => {
            let scores = ablated_scores(net, &cap, unit, class)?;
            weighted_map(c, &cap.acts, &ablation_weights(cap.logits[class], &scores))
        }
        CamMethod::RandomCam => weighted_map(c, &cap.acts, &random_weights(c, opts.seed)),
    };
    Ok((map, cap, class))
}

/// Attribution map at input resolution.
pub fn explain(net: &ResidualNet<f32>, image: &[f32], method: CamMethod, opts: &CamOptions) -> Result<AttributionMap> {
    let (map, cap, class) = raw_map(net, image, method, opts)?;
    let size = net.config().input_size;
    let mut values = upsample_bilinear(&map, cap.h, cap.w, size, size);
    normalize(&mut values);
    Ok(AttributionMap {
        values,
        size,
        target_class: class,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;

    fn random(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn single_channel_mean_score() {
        // Y = mean(A): dY/dA = 1/(hw) everywhere
        let (h, w) = (3, 4);
        let acts = random(h * w, 1, -1.0, 2.0);
        let grads = vec![1.0 / 12.0; 12];
        let alpha = grad_cam_weights(1, &grads);
        assert!((alpha[0] - 1.0 / 12.0).abs() < 1e-15);
        let map = weighted_map(1, &acts, &alpha);
        for (m, a) in map.iter().zip(&acts) {
            assert!((m - alpha[0] * a.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_combination_is_zero() {
        let acts = random(2 * 9, 2, 0.0, 1.0);
        assert!(weighted_map(2, &acts, &[-1.0, -0.5]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pp_zero_gradients_zero_weights() {
        let acts = random(18, 3, 0.0, 1.0);
        assert_eq!(grad_cam_pp_weights(2, &acts, &[0.0; 18]), vec![0.0, 0.0]);
    }

    #[test]
    fn pp_single_location_matches_grad_cam_sign() {
        let acts = [0.7, 1.2, 0.1];
        let grads = [0.3, -0.2, 0.5];
        let gc = grad_cam_weights(3, &grads);
        let pp = grad_cam_pp_weights(3, &acts, &grads);
        for (a, b) in gc.iter().zip(&pp) {
            assert_eq!(*a > 0.0, *b > 0.0);
        }
        let mut m1 = upsample_bilinear(&weighted_map(3, &acts, &gc), 1, 1, 8, 8);
        let mut m2 = upsample_bilinear(&weighted_map(3, &acts, &pp), 1, 1, 8, 8);
        normalize(&mut m1);
        normalize(&mut m2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn eigen_rank_one() {
        let v = [0.1, 0.0, 0.5, 0.9, 0.3, 0.2];
        let c = [1.0, -2.0, 0.5];
        let acts: Vec<f64> = c.iter().flat_map(|ck| v.iter().map(move |vi| ck * vi)).collect();
        let map = eigen_cam_map(3, &acts);
        let ratio = map[3] / v[3];
        for (m, vi) in map.iter().zip(&v) {
            assert!((m - ratio * vi.abs()).abs() < 1e-10);
        }
    }

    #[test]
    fn eigen_duplicate_channels() {
        let a = random(12, 4, 0.0, 1.0);
        let dup: Vec<f64> = a.iter().chain(a.iter()).copied().collect();
        let mut m1 = eigen_cam_map(1, &a);
        let mut m2 = eigen_cam_map(2, &dup);
        normalize(&mut m1);
        normalize(&mut m2);
        for (x, y) in m1.iter().zip(&m2) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn eigen_matches_power_iteration() {
        let (c, hw) = (16, 25);
        let acts = random(c * hw, 5, 0.0, 1.0);
        let map = eigen_cam_map(c, &acts);
        // power iteration on M^T M
        let mut v = vec![1.0; hw];
        for _ in 0..200 {
            let mv: Vec<f64> = (0..c).map(|k| (0..hw).map(|j| acts[k * hw + j] * v[j]).sum()).collect();
            let mut next: Vec<f64> = (0..hw).map(|j| (0..c).map(|k| acts[k * hw + j] * mv[k]).sum()).collect();
            let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            next.iter_mut().for_each(|x| *x /= n);
            v = next;
        }
        let dot: f64 = map.iter().zip(&v).map(|(a, b)| a * b).sum();
        let cos = dot / map.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(1.0 - cos < 1e-4, "{cos}");
    }

    #[test]
    fn eigen_all_zero() {
        assert!(eigen_cam_map(3, &[0.0; 12]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_weights_in_range() {
        for s in 0..100 {
            assert!(random_weights(100, s).iter().all(|w| (-1.0..=1.0).contains(w)));
        }
        assert_eq!(random_weights(8, 3), random_weights(8, 3));
    }

    #[test]
    fn normalization_and_upsampling() {
        let mut m = vec![2.0, 4.0, 3.0, 2.0];
        normalize(&mut m);
        assert_eq!(m, vec![0.0, 1.0, 0.5, 0.0]);
        let mut flat = upsample_bilinear(&[0.3; 4], 2, 2, 7, 7);
        normalize(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
        let up = upsample_bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
    }

    fn net_and_image() -> (ResidualNet<f32>, Vec<f32>) {
        let cfg = NetConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            input_size: 16,
            ..NetConfig::default()
        };
        let net = ResidualNet::build(&cfg, 3).unwrap();
        let img = random(3 * 256, 9, -1.0, 1.0).into_iter().map(|v| v as f32).collect();
        (net, img)
    }

    #[test]
    fn ablation_shortcut_matches_full_forward() {
        let (net, img) = net_and_image();
        for unit in [net.last_conv_unit(), 1] {
            let cap = capture(&net, &img, unit, None).unwrap();
            let fast = ablated_scores(&net, &cap, unit, 2).unwrap();
            let slow = ablated_scores_full(&net, &img, unit, 2, cap.channels).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn hook_gradient_matches_finite_difference() {
        let (net, img) = net_and_image();
        let unit = net.last_conv_unit();
        let cap = capture(&net, &img, unit, Some(1)).unwrap();
        let grads = cap.grads.clone().unwrap();
        // the head after the last block is linear in A: pool then fc
        let (w, _) = net.fc();
        let fc = net.tensor(w).to_f64_vec();
        let plane = cap.plane();
        for k in 0..cap.channels {
            let expect = fc[cap.channels + k] / plane as f64;
            for g in &grads[k * plane..(k + 1) * plane] {
                assert!((g - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_ignored_channel_has_zero_ablation_weight() {
        let (mut net, img) = net_and_image();
        let (w, _) = net.fc();
        let c = net.tensor(w).shape()[1];
        for class in 0..4 {
            net.tensor_mut(w).data_mut()[class * c + 3] = 0.0;
        }
        let unit = net.last_conv_unit();
        let cap = capture(&net, &img, unit, None).unwrap();
        let scores = ablated_scores(&net, &cap, unit, 0).unwrap();
        let weights = ablation_weights(cap.logits[0], &scores);
        assert!(weights[3].abs() < 1e-6);
    }

    #[test]
    fn linear_head_ablation_proportional_to_grad_cam() {
        let (net, img) = net_and_image();
        let unit = net.last_conv_unit();
        let cap = capture(&net, &img, unit, Some(0)).unwrap();
        let alpha = grad_cam_weights(cap.channels, cap.grads.as_ref().unwrap());
        let scores = ablated_scores(&net, &cap, unit, 0).unwrap();
        let abl = ablation_weights(cap.logits[0], &scores);
        // Y - Y_k = alpha_k * sum(A_k), so abl_k * |Y| = alpha_k * sum(A_k)
        let plane = cap.plane();
        for k in 0..cap.channels {
            let sum_a: f64 = cap.acts[k * plane..(k + 1) * plane].iter().sum();
            let lhs = abl[k] * (cap.logits[0].abs() + 1e-8);
            assert!((lhs - alpha[k] * sum_a).abs() < 1e-5, "{k}: {lhs} vs {}", alpha[k] * sum_a);
        }
    }

    #[test]
    fn maps_are_normalized_for_every_method() {
        let (net, img) = net_and_image();
        for method in CamMethod::ALL {
            let m = explain(&net, &img, method, &CamOptions::default()).unwrap();
            assert_eq!(m.values.len(), 256);
            assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)), "{method:?}");
        }
    }

    #[test]
    fn activation_scaling_leaves_grad_cam_unchanged() {
        let acts = random(4 * 9, 6, 0.0, 1.0);
        let grads = random(4 * 9, 7, -1.0, 1.0);
        let alpha = grad_cam_weights(4, &grads);
        let mut a = weighted_map(4, &acts, &alpha);
        let scaled: Vec<f64> = acts.iter().map(|v| v * 3.5).collect();
        let mut b = weighted_map(4, &scaled, &alpha);
        normalize(&mut a);
        normalize(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_activations_give_zero_maps() {
        let acts = vec![0.4; 3 * 16];
        let grads = random(48, 8, -1.0, 1.0);
        let maps = [
            weighted_map(3, &acts, &grad_cam_weights(3, &grads)),
            weighted_map(3, &acts, &grad_cam_pp_weights(3, &acts, &grads)),
            eigen_cam_map(3, &acts),
            weighted_map(3, &acts, &[0.2, -0.1, 0.3]),
            weighted_map(3, &acts, &random_weights(3, 1)),
        ];
        for m in maps {
            let mut up = upsample_bilinear(&m, 4, 4, 16, 16);
            normalize(&mut up);
            assert!(up.iter().all(|&v| v == 0.0));
        }
    }
}
