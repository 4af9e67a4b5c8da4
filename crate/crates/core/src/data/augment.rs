use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Draws for one augmentation call. Each transform fires with probability 0.5.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub flip: bool,
    pub rotation_deg: Option<f64>,
    pub jitter: Option<[f64; 3]>,
}

impl AugmentPlan {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.gen_bool(0.5);
        let rot = rng.gen_bool(0.5);
        let angle = rng.gen_range(-15.0..=15.0);
        let jit = rng.gen_bool(0.5);
        let scales = [rng.gen_range(0.8..=1.2), rng.gen_range(0.8..=1.2), rng.gen_range(0.8..=1.2)];
        Self {
            flip,
            rotation_deg: rot.then_some(angle),
            jitter: jit.then_some(scales),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.rotation_deg.is_none() && self.jitter.is_none()
    }

    /// Applies the plan to a channel-major image and its validity mask.
    pub fn apply(&self, pixels: &[f32], mask: &[bool], size: usize) -> (Vec<f32>, Vec<bool>) {
        let mut px = pixels.to_vec();
        let mut m = mask.to_vec();
        if self.flip {
            px = flip_horizontal(&px, size, 3);
            m = flip_horizontal(&m, size, 1);
        }
        if let Some(deg) = self.rotation_deg {
            let (p, mm) = rotate(&px, &m, size, deg);
            px = p;
            m = mm;
        }
        if let Some(s) = self.jitter {
            let plane = size * size;
            for (ch, scale) in s.iter().enumerate() {
                for v in &mut px[ch * plane..(ch + 1) * plane] {
                    *v = (*v as f64 * scale) as f32;
                }
            }
        }
        (px, m)
    }
}

/// Samples a plan from `seed` and applies it.
pub fn augment(pixels: &[f32], mask: &[bool], size: usize, seed: u64) -> (Vec<f32>, Vec<bool>) {
    AugmentPlan::sample(seed).apply(pixels, mask, size)
}

fn flip_horizontal<T: Copy>(data: &[T], size: usize, planes: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for p in 0..planes {
        for r in 0..size {
            let row = (p * size + r) * size;
            for c in 0..size {
                out[row + c] = data[row + size - 1 - c];
            }
        }
    }
    out
}

/// Counter-clockwise rotation about the image centre with bilinear sampling.
/// Pixels whose source falls outside the original mask become 0.
fn rotate(pixels: &[f32], mask: &[bool], size: usize, deg: f64) -> (Vec<f32>, Vec<bool>) {
    let (sin, cos) = deg.to_radians().sin_cos();
    let centre = (size as f64 - 1.0) / 2.0;
    let plane = size * size;
    let mut out = vec![0.0f32; pixels.len()];
    let mut out_mask = vec![false; plane];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 - centre, c as f64 - centre);
            // inverse map: rotate the destination back by -deg
            let sx = cos * x - sin * y + centre;
            let sy = sin * x + cos * y + centre;
            let nr = sy.round();
            let nc = sx.round();
            let inside = nr >= 0.0 && nc >= 0.0 && (nr as usize) < size && (nc as usize) < size;
            if !inside || !mask[nr as usize * size + nc as usize] {
                continue;
            }
            out_mask[r * size + c] = true;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            for ch in 0..3 {
                let at = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= size as f64 || xx >= size as f64 {
                        return 0.0;
                    }
                    let i = yy as usize * size + xx as usize;
                    if mask[i] {
                        pixels[ch * plane + i] as f64
                    } else {
                        0.0
                    }
                };
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1.0) * (1.0 - fy) * fx
                    + at(y0 + 1.0, x0) * fy * (1.0 - fx)
                    + at(y0 + 1.0, x0 + 1.0) * fy * fx;
                out[ch * plane + r * size + c] = v as f32;
            }
        }
    }
    (out, out_mask)
}
