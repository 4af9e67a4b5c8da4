//! Synthetic stand-in for the cleansing-grade images: pink mucosa, brown and
//! yellow debris blobs whose in-mask area fixes the label, and bubble rings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{valid_mask, LabeledImage, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    /// Debris fraction interval `[lo, hi)` per class, indexed poor..excellent.
    pub class_occlusion_ranges: [[f64; 2]; NUM_CLASSES],
    pub samples_per_class: [usize; NUM_CLASSES],
    pub max_blobs: usize,
    pub bubbles: bool,
    /// Share of each range's width kept clear next to a neighbouring class,
    /// so no image sits on a grading threshold.
    pub boundary_margin: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            class_occlusion_ranges: [[0.50, 0.85], [0.25, 0.50], [0.05, 0.25], [0.0, 0.05]],
            samples_per_class: [125; NUM_CLASSES],
            max_blobs: 64,
            bubbles: true,
            boundary_margin: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..0.5).contains(&self.boundary_margin) {
            return bad(format!("boundary_margin {} outside [0, 0.5)", self.boundary_margin));
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} below 16", self.image_size));
        }
        for (c, &[lo, hi]) in self.class_occlusion_ranges.iter().enumerate() {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return bad(format!("occlusion range for {} is [{lo}, {hi})", CLASS_NAMES[c]));
            }
            if c + 1 < NUM_CLASSES && self.class_occlusion_ranges[c + 1][1] > lo {
                return bad(format!(
                    "occlusion ranges must be disjoint and decrease from {} to {}",
                    CLASS_NAMES[c],
                    CLASS_NAMES[c + 1]
                ));
            }
            if self.max_blobs == 0 && lo > 0.0 && self.samples_per_class[c] > 0 {
                return bad(format!("{} needs debris but max_blobs is 0", CLASS_NAMES[c]));
            }
        }
        Ok(())
    }

    /// Placement interval for a class after applying the boundary margin.
    pub fn placement_range(&self, class: usize) -> [f64; 2] {
        let [lo, hi] = self.class_occlusion_ranges[class];
        let m = self.boundary_margin * (hi - lo);
        let lo = if class + 1 < NUM_CLASSES { lo + m } else { lo };
        let hi = if class > 0 { hi - m } else { hi };
        [lo, hi]
    }
}

const MUCOSA: [f64; 3] = [0.86, 0.52, 0.50];
const BROWN: [f64; 3] = [0.50, 0.32, 0.12];
const YELLOW: [f64; 3] = [0.80, 0.68, 0.22];
const BUBBLE: [f64; 3] = [0.95, 0.93, 0.93];

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, r: usize, c: usize) -> bool {
        let (dy, dx) = (r as f64 - self.cy, c as f64 - self.cx);
        let (s, co) = self.theta.sin_cos();
        let u = co * dx + s * dy;
        let v = -s * dx + co * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Places debris until the in-mask fraction reaches a target drawn from
/// `[lo, hi)` without ever reaching `hi`. Returns the debris map and each
/// pixel's blob colour index.
fn place_debris(rng: &mut ChaCha8Rng, size: usize, mask: &[bool], lo: f64, hi: f64, max_blobs: usize) -> (Vec<bool>, Vec<u8>) {
    let inside: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let n_in = inside.len() as f64;
    loop {
        let target = rng.gen_range(lo..hi);
        let mut debris = vec![false; mask.len()];
        let mut colour = vec![0u8; mask.len()];
        let mut count = 0usize;
        let mut blobs = 0;
        let mut attempts = 0;
        while (count as f64) < target * n_in && blobs < max_blobs && attempts < 4000 {
            attempts += 1;
            let remaining = (target * n_in - count as f64).max(1.0);
            let area = remaining * rng.gen_range(0.4..1.4);
            let aspect: f64 = rng.gen_range(1.0..2.0);
            let r = (area / std::f64::consts::PI).sqrt().max(0.8);
            let centre = inside[rng.gen_range(0..inside.len())];
            let e = Ellipse {
                cy: (centre / size) as f64,
                cx: (centre % size) as f64,
                a: r * aspect.sqrt(),
                b: r / aspect.sqrt(),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            };
            let reach = e.a.ceil() as isize + 1;
            let mut fresh = Vec::new();
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let (rr, cc) = (e.cy as isize + dr, e.cx as isize + dc);
                    if rr < 0 || cc < 0 || rr >= size as isize || cc >= size as isize {
                        continue;
                    }
                    let i = rr as usize * size + cc as usize;
                    if mask[i] && !debris[i] && e.contains(rr as usize, cc as usize) {
                        fresh.push(i);
                    }
                }
            }
            if fresh.is_empty() || (count + fresh.len()) as f64 >= hi * n_in {
                continue;
            }
            let tint = rng.gen_range(1..=2u8);
            for &i in &fresh {
                debris[i] = true;
                colour[i] = tint;
            }
            count += fresh.len();
            blobs += 1;
        }
        let frac = count as f64 / n_in;
        if frac >= lo && frac < hi {
            return (debris, colour);
        }
    }
}

// 6.28 rather than TAU: the generated images are pinned by tests and runs.
#[allow(clippy::approx_constant)]
fn render(rng: &mut ChaCha8Rng, size: usize, mask: &[bool], colour: &[u8], bubbles: bool) -> Vec<f32> {
    let plane = size * size;
    let gain = rng.gen_range(0.85..1.1);
    let phase: [f64; 4] = [
        rng.gen_range(0.0..6.3),
        rng.gen_range(0.0..6.3),
        rng.gen_range(1.0..3.0),
        rng.gen_range(1.0..3.0),
    ];
    let mut rings = Vec::new();
    if bubbles {
        let scale = size as f64 / 64.0;
        for _ in 0..rng.gen_range(0..=3) {
            rings.push((
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(2.0..5.0) * scale,
            ));
        }
    }
    let mut px = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        if !mask[i] {
            continue;
        }
        let (r, c) = ((i / size) as f64, (i % size) as f64);
        let (y, x) = (r / size as f64, c / size as f64);
        let shade = gain * (1.0 + 0.06 * (phase[2] * 6.28 * x + phase[0]).sin() * (phase[3] * 6.28 * y + phase[1]).cos());
        let on_ring = rings
            .iter()
            .any(|&(ry, rx, rad)| (((r - ry).powi(2) + (c - rx).powi(2)).sqrt() - rad).abs() < 0.6);
        let base = match colour[i] {
            1 => BROWN,
            2 => YELLOW,
            _ if on_ring => BUBBLE,
            _ => MUCOSA,
        };
        for ch in 0..3 {
            let noise: f64 = rng.gen_range(-0.03..0.03);
            let v = (base[ch] * shade + noise).clamp(0.0, 1.0);
            px[ch * plane + i] = ((v * 255.0).round() / 255.0) as f32;
        }
    }
    px
}

/// Generates `samples_per_class` images per class, class-major, ids
/// `synth_<class>_<n>`. Every image draws from its own RNG stream, so a
/// fixed seed reproduces the dataset exactly.
pub fn generate_synth(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let size = spec.image_size;
    let mask = valid_mask(size);
    let mut out = Vec::new();
    for (class, &count) in spec.samples_per_class.iter().enumerate() {
        let [lo, hi] = spec.placement_range(class);
        for n in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((class as u64) << 32) | n as u64);
            let (debris, colour) = if spec.max_blobs == 0 {
                (vec![false; mask.len()], vec![0u8; mask.len()])
            } else {
                place_debris(&mut rng, size, &mask, lo, hi, spec.max_blobs)
            };
            let pixels = render(&mut rng, size, &mask, &colour, spec.bubbles);
            let mut img = LabeledImage::new(format!("synth_{}_{n:04}", CLASS_NAMES[class]), class, size, pixels)?;
            img.debris = Some(debris);
            out.push(img);
        }
    }
    Ok(out)
}
