//! On-disk layout: `<root>/<class>/<id>.png` plus `<root>/manifest.csv`
//! with columns `id,class,split`.

use std::fs::File;
use std::path::Path;

use super::{LabeledImage, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_atomic_str};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub class: usize,
    pub split: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn write_png(path: &Path, img: &LabeledImage) -> Result<()> {
    let size = img.size;
    let plane = size * size;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            rgb.push((img.pixels[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, size as u32, size as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        w.write_image_data(&rgb).map_err(|e| Error::Image(e.to_string()))?;
    }
    write_atomic(path, &bytes)
}

fn read_png(path: &Path) -> Result<(usize, Vec<f32>)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w != h {
        return Err(Error::Image(format!("{}: {w}x{h} is not square", path.display())));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Image(format!("{}: unsupported colour type {other:?}", path.display()))),
    };
    let plane = w * h;
    let mut px = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            let src = if stride >= 3 { ch } else { 0 };
            px[ch * plane + i] = buf[i * stride + src] as f32 / 255.0;
        }
    }
    Ok((w, px))
}

/// Writes images and a manifest. `splits` labels each image (for example a
/// fold index); `None` writes `all`.
pub fn write_dataset(root: &Path, images: &[LabeledImage], splits: Option<&[String]>) -> Result<()> {
    for name in CLASS_NAMES {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut manifest = String::from("id,class,split\n");
    for (i, img) in images.iter().enumerate() {
        if img.id.contains([',', '/', '\\', '\n']) {
            return Err(Error::Invalid(format!("image id {:?} is not file-name safe", img.id)));
        }
        let path = root.join(CLASS_NAMES[img.label]).join(format!("{}.png", img.id));
        write_png(&path, img)?;
        let split = splits.map_or("all", |s| s[i].as_str());
        manifest.push_str(&format!("{},{},{}\n", img.id, CLASS_NAMES[img.label], split));
    }
    write_atomic_str(&root.join("manifest.csv"), &manifest)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join("manifest.csv");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines();
    if lines.next() != Some("id,class,split") {
        return Err(Error::Invalid(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            let [id, class, split] = cols[..] else {
                return Err(Error::Invalid(format!("{} line {}: expected 3 columns", path.display(), n + 2)));
            };
            let class = CLASS_NAMES
                .iter()
                .position(|c| *c == class)
                .ok_or_else(|| Error::Invalid(format!("{} line {}: unknown class {class}", path.display(), n + 2)))?;
            Ok(ManifestRow {
                id: id.to_string(),
                class,
                split: split.to_string(),
            })
        })
        .collect()
}

/// Reads a dataset written by [`write_dataset`], in manifest order.
pub fn read_dataset(root: &Path) -> Result<Vec<(LabeledImage, String)>> {
    read_manifest(root)?
        .into_iter()
        .map(|row| {
            let path = root.join(CLASS_NAMES[row.class]).join(format!("{}.png", row.id));
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            let (size, px) = read_png(&path)?;
            Ok((LabeledImage::new(row.id, row.class, size, px)?, row.split))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth, SynthSpec};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            image_size: 20,
            samples_per_class: [2, 1, 1, 2],
            ..SynthSpec::default()
        };
        let imgs = generate_synth(&spec).unwrap();
        let splits: Vec<String> = (0..imgs.len()).map(|i| format!("fold{}", i % 2)).collect();
        write_dataset(dir.path(), &imgs, Some(&splits)).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), imgs.len());
        for ((img, split), (orig, s)) in back.iter().zip(imgs.iter().zip(&splits)) {
            assert_eq!(img.id, orig.id);
            assert_eq!(img.label, orig.label);
            assert_eq!(img.pixels, orig.pixels);
            assert_eq!(split, s);
        }
        assert!(dir.path().join("poor").join("synth_poor_0001.png").exists());
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::MissingArtifact(_))));
    }
}
