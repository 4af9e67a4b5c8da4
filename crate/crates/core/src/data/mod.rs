//! Images, masks, normalization, labels and fold planning.

mod augment;
mod disk;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentPlan};
pub use disk::{read_dataset, read_manifest, write_dataset, ManifestRow};
pub use synth::{generate_synth, SynthSpec};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["poor", "fair", "good", "excellent"];
pub const BORDER: usize = 4;

/// An RGB image stored channel-major (`3 x H x W`), square.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub label: usize,
    pub size: usize,
    pub pixels: Vec<f32>,
    pub valid_mask: Vec<bool>,
    /// Construction-time debris map, synthetic images only.
    pub debris: Option<Vec<bool>>,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, label: usize, size: usize, pixels: Vec<f32>) -> Result<Self> {
        if label >= NUM_CLASSES {
            return Err(Error::Invalid(format!("label {label} outside 0..{NUM_CLASSES}")));
        }
        if pixels.len() != 3 * size * size {
            return Err(Error::shape("image", &[3, size, size], &[pixels.len()]));
        }
        Ok(Self {
            id: id.into(),
            label,
            size,
            pixels,
            valid_mask: valid_mask(size),
            debris: None,
        })
    }

    /// In-mask fraction of debris pixels, if known.
    pub fn debris_fraction(&self) -> Option<f64> {
        let d = self.debris.as_ref()?;
        let inside = self.valid_mask.iter().filter(|&&m| m).count();
        let hit = d.iter().zip(&self.valid_mask).filter(|(&d, &m)| d && m).count();
        Some(hit as f64 / inside as f64)
    }
}

/// Inscribed circle intersected with the interior left after stripping a
/// fixed border. Radius is `floor(size / 2) - BORDER`.
pub fn valid_mask(size: usize) -> Vec<bool> {
    let radius = (size / 2).saturating_sub(BORDER) as f64;
    let centre = (size as f64 - 1.0) / 2.0;
    let inner = BORDER..size.saturating_sub(BORDER);
    let mut mask = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (dy, dx) = (r as f64 - centre, c as f64 - centre);
            mask.push(inner.contains(&r) && inner.contains(&c) && dy * dy + dx * dx <= radius * radius);
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub pixels: Vec<f32>,
    /// Zero variance inside the mask; the output is all zeros.
    pub degenerate: bool,
}

/// Zeroes pixels outside the mask and standardizes the inside jointly over
/// all three channels.
pub fn preprocess(pixels: &[f32], size: usize) -> Result<Preprocessed> {
    if size < 16 {
        return Err(Error::Invalid(format!("image size {size} below the minimum of 16")));
    }
    if pixels.len() != 3 * size * size {
        return Err(Error::shape("preprocess", &[3, size, size], &[pixels.len()]));
    }
    let mask = valid_mask(size);
    let plane = size * size;
    let inside = || (0..3).flat_map(|ch| (0..plane).filter(|&i| mask[i]).map(move |i| ch * plane + i));
    let n = inside().count() as f64;
    let mean = inside().map(|i| pixels[i] as f64).sum::<f64>() / n;
    let var = inside().map(|i| (pixels[i] as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let degenerate = std < 1e-12;
    let mut out = vec![0.0f32; pixels.len()];
    if !degenerate {
        for i in inside() {
            out[i] = ((pixels[i] as f64 - mean) / std) as f32;
        }
    }
    Ok(Preprocessed { pixels: out, degenerate })
}

/// Zeroes every pixel outside `mask` (all channels).
pub fn apply_mask(pixels: &mut [f32], mask: &[bool]) {
    let plane = mask.len();
    for (i, v) in pixels.iter_mut().enumerate() {
        if !mask[i % plane] {
            *v = 0.0;
        }
    }
}

/// Most frequent vote; ties go to the lower class index.
pub fn mode_label(votes: &[usize]) -> Result<usize> {
    if votes.is_empty() {
        return Err(Error::Invalid("mode of an empty vote list".into()));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &v in votes {
        if v >= NUM_CLASSES {
            return Err(Error::Invalid(format!("vote {v} outside 0..{NUM_CLASSES}")));
        }
        counts[v] += 1;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold of each dataset item, aligned with the dataset order.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn val_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }
}

/// Shuffles each class, concatenates the classes in order and deals the
/// result round-robin, so every fold's class count is within one of ideal.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k}; need at least 2 folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(labels.len());
    for (class, name) in CLASS_NAMES.iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::ClassTooSmall {
                class: name,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        order.extend(members);
    }
    if order.len() != labels.len() {
        return Err(Error::Invalid(format!("labels outside 0..{NUM_CLASSES}")));
    }
    let mut assignments = vec![0; labels.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k;
    }
    Ok(FoldPlan { k, seed, assignments })
}

/// Stacks channel-major images into an `N x 3 x S x S` batch.
pub fn to_batch(images: &[&[f32]], size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.len() != 3 * size * size {
            return Err(Error::shape("batch", &[3, size, size], &[img.len()]));
        }
        data.extend_from_slice(img);
    }
    Tensor::new(&[images.len(), 3, size, size], data)
}

/// Nearest-neighbor square resize of a channel-major image.
pub fn resize_nearest(pixels: &[f32], from: usize, to: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * to * to);
    for ch in 0..3 {
        for r in 0..to {
            let sr = (r * from) / to;
            for c in 0..to {
                out.push(pixels[ch * from * from + sr * from + (c * from) / to]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn constant_image_is_degenerate() {
        let p = preprocess(&vec![0.5; 3 * 32 * 32], 32).unwrap();
        assert!(p.degenerate);
        assert!(p.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_level_image_maps_to_unit_values() {
        let size = 32;
        let mask = valid_mask(size);
        let mut px = vec![0.0f32; 3 * size * size];
        // alternate 0/1 within each channel's in-mask pixels; per channel the
        // in-mask count is the same, so channel 0 and 1 take opposite values
        let plane = size * size;
        for ch in 0..3 {
            let mut flip = ch % 2 == 0;
            for i in 0..plane {
                if mask[i] {
                    px[ch * plane + i] = if flip { 1.0 } else { 0.0 };
                    flip = !flip;
                }
            }
        }
        let inside = mask.iter().filter(|&&m| m).count();
        assert_eq!(inside % 2, 0, "even count needed for equal halves");
        let out = preprocess(&px, size).unwrap().pixels;
        for ch in 0..3 {
            for i in 0..plane {
                let v = out[ch * plane + i];
                if mask[i] {
                    assert!((v.abs() - 1.0).abs() < 1e-6, "{v}");
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn random_image_standardized() {
        let size = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let px: Vec<f32> = (0..3 * size * size).map(|_| rng.gen()).collect();
        let out = preprocess(&px, size).unwrap().pixels;
        let mask = valid_mask(size);
        let vals: Vec<f64> = (0..out.len()).filter(|&i| mask[i % (size * size)]).map(|i| out[i] as f64).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6, "{mean} {sd}");
    }

    #[test]
    fn masking_is_idempotent() {
        let mask = valid_mask(20);
        let mut a: Vec<f32> = (0..1200).map(|i| i as f32).collect();
        apply_mask(&mut a, &mask);
        let mut b = a.clone();
        apply_mask(&mut b, &mask);
        assert_eq!(a, b);
    }

    #[test]
    fn mask_geometry() {
        let m = valid_mask(64);
        assert!(m[32 * 64 + 32]);
        assert!(!m[0] && !m[3 * 64 + 32]);
        assert!(m[5 * 64 + 32]);
    }

    #[test]
    fn mode_examples() {
        assert_eq!(mode_label(&[2, 2, 1]).unwrap(), 2);
        assert_eq!(mode_label(&[1, 2]).unwrap(), 1);
        let mut votes = vec![2; 6];
        votes.extend([1; 5]);
        votes.extend([3; 3]);
        assert_eq!(mode_label(&votes).unwrap(), 2);
        assert!(mode_label(&[]).is_err());
    }

    #[test]
    fn balanced_tenfold() {
        let labels: Vec<usize> = (0..500).map(|i| i % 4).collect();
        let plan = stratified_kfold(&labels, 10, 1).unwrap();
        for f in 0..10 {
            let val = plan.val_indices(f);
            assert_eq!(val.len(), 50);
            for c in 0..4 {
                let n = val.iter().filter(|&&i| labels[i] == c).count();
                assert!((12..=13).contains(&n));
            }
        }
    }

    #[test]
    fn small_class_rejected_by_name() {
        let err = stratified_kfold(&[0, 1, 2, 3], 4, 0).unwrap_err();
        assert!(err.to_string().contains("poor"), "{err}");
    }

    #[test]
    fn skewed_counts_within_one() {
        let counts = [200usize, 37, 101, 65];
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        assert_eq!(labels.len(), 403);
        let plan = stratified_kfold(&labels, 10, 7).unwrap();
        for f in 0..10 {
            for (c, &n) in counts.iter().enumerate() {
                let got = plan.val_indices(f).iter().filter(|&&i| labels[i] == c).count() as f64;
                assert!((got - n as f64 / 10.0).abs() <= 1.0);
            }
        }
        assert_eq!(plan, stratified_kfold(&labels, 10, 7).unwrap());
    }
}
