//! Localization checks against a model trained on synthetic images.

use std::sync::OnceLock;

use prunecam::cam::{explain, CamMethod, CamOptions};
use prunecam::data::{generate_synth, LabeledImage, SynthSpec};
use prunecam::model::{NetConfig, ResidualNet};
use prunecam::train::{evaluate, train_one, Example, TrainConfig};

const SIZE: usize = 32;

struct Fixture {
    net: ResidualNet<f32>,
    val_images: Vec<LabeledImage>,
    val_acc: f64,
}

fn synth(per_class: usize, seed: u64) -> Vec<LabeledImage> {
    generate_synth(&SynthSpec {
        image_size: SIZE,
        samples_per_class: [per_class; 4],
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let train_images = synth(60, 11);
        let val_images = synth(25, 12);
        let train: Vec<Example> = train_images.iter().map(|i| Example::from_image(i).unwrap()).collect();
        let val: Vec<Example> = val_images.iter().map(|i| Example::from_image(i).unwrap()).collect();
        let cfg = NetConfig {
            input_size: SIZE,
            ..NetConfig::default()
        };
        let net = ResidualNet::build(&cfg, 5).unwrap();
        let tc = TrainConfig {
            max_epochs: 25,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train_one(&net, &train.iter().collect::<Vec<_>>(), &val.iter().collect::<Vec<_>>(), &tc, None, 0).unwrap();
        let (val_acc, _) = evaluate(&out.net, &val.iter().collect::<Vec<_>>()).unwrap();
        Fixture {
            net: out.net,
            val_images,
            val_acc,
        }
    })
}

fn map_for(net: &ResidualNet<f32>, img: &LabeledImage, method: CamMethod, target: Option<&str>) -> Vec<f64> {
    let ex = Example::from_image(img).unwrap();
    let opts = CamOptions {
        target: target.map(String::from),
        ..CamOptions::default()
    };
    explain(net, &ex.pixels, method, &opts).unwrap().values
}

fn mean_over(map: &[f64], select: impl Fn(usize) -> bool) -> f64 {
    let picked: Vec<f64> = (0..map.len()).filter(|&i| select(i)).map(|i| map[i]).collect();
    picked.iter().sum::<f64>() / picked.len().max(1) as f64
}

/// Mean map value over debris and background, and how many Poor images
/// put more attribution on debris.
fn poor_image_split(f: &Fixture, target: Option<&str>) -> (f64, f64, usize, usize) {
    let (mut on, mut off, mut wins, mut total) = (0.0, 0.0, 0, 0);
    for img in f.val_images.iter().filter(|i| i.label == 0) {
        let map = map_for(&f.net, img, CamMethod::GradCam, target);
        let debris = img.debris.as_ref().unwrap();
        let d = mean_over(&map, |i| img.valid_mask[i] && debris[i]);
        let b = mean_over(&map, |i| img.valid_mask[i] && !debris[i]);
        wins += usize::from(d > b);
        total += 1;
        on += d;
        off += b;
    }
    (on / total as f64, off / total as f64, wins, total)
}

#[test]
fn grad_cam_prefers_debris_on_poor_images() {
    let f = fixture();
    assert!(f.val_acc >= 0.9, "fixture model reached only {:.3}", f.val_acc);
    // the default hook is a 2x2 grid at 32 px, so only the average separates
    let (on, off, _, _) = poor_image_split(f, None);
    assert!(on > off, "last block: debris {on:.3} vs background {off:.3}");
    let (on, off, wins, total) = poor_image_split(f, Some("layer3.1"));
    assert!(on > off + 0.1, "layer3.1: debris {on:.3} vs background {off:.3}");
    assert!(wins * 10 >= total * 9, "layer3.1: debris ahead on {wins}/{total} images");
}

/// A clean image with brown discs painted at the given centres.
fn painted(base: &LabeledImage, centres: &[(f64, f64)], radius: f64) -> (LabeledImage, Vec<Vec<bool>>) {
    let plane = SIZE * SIZE;
    let mut pixels = base.pixels.clone();
    let mut regions = Vec::new();
    for &(cy, cx) in centres {
        let mut region = vec![false; plane];
        for i in 0..plane {
            let (r, c) = ((i / SIZE) as f64, (i % SIZE) as f64);
            if base.valid_mask[i] && (r - cy).hypot(c - cx) <= radius {
                region[i] = true;
                for (ch, v) in [0.50f32, 0.32, 0.12].into_iter().enumerate() {
                    pixels[ch * plane + i] = v;
                }
            }
        }
        regions.push(region);
    }
    let img = LabeledImage::new(format!("{}_painted", base.id), base.label, SIZE, pixels).unwrap();
    (img, regions)
}

fn peak(map: &[f64], region: &[bool]) -> f64 {
    (0..map.len()).filter(|&i| region[i]).map(|i| map[i]).fold(0.0, f64::max)
}

#[test]
fn grad_cam_pp_covers_both_blobs() {
    let f = fixture();
    let clean = f.val_images.iter().find(|i| i.label == 3 && i.debris_fraction() == Some(0.0)).unwrap_or_else(|| {
        f.val_images.iter().find(|i| i.label == 3).unwrap()
    });
    let (a, b) = ((16.0, 9.0), (16.0, 23.0));
    let (single, single_regions) = painted(clean, &[a], 5.0);
    let (double, regions) = painted(clean, &[a, b], 5.0);
    let single_map = map_for(&f.net, &single, CamMethod::GradCamPlusPlus, None);
    let single_peak = peak(&single_map, &single_regions[0]);
    let map = map_for(&f.net, &double, CamMethod::GradCamPlusPlus, None);
    for (k, region) in regions.iter().enumerate() {
        let p = peak(&map, region);
        assert!(p >= 0.5 * single_peak, "blob {k}: peak {p:.3} vs single-blob peak {single_peak:.3}");
    }
}
