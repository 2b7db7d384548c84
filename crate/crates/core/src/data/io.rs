use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, CorpusManifest, DataSplit};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: CorpusManifest,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn split(&self, split: DataSplit) -> Vec<&AnnotatedImage> {
        self.images.iter().filter(|i| i.split == split).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: usize,
    path: String,
    split: DataSplit,
    boxes: Vec<BBox>,
    labels: Vec<String>,
}

fn to_rgb(img: &Tensor) -> RgbImage {
    let (_, h, w) = img.chw();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |ch: usize| (img.data[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

fn from_rgb(rgb: &RgbImage) -> Tensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * h * w + i] = p.0[ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes `manifest.json`, `annotations.jsonl` and lossless PNGs under `images/`.
pub fn save_dataset(dir: &Path, manifest: &CorpusManifest, images: &[AnnotatedImage]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
    let mut ann = BufWriter::new(fs::File::create(dir.join(ANNOTATIONS_FILE))?);
    for img in images {
        let path = format!("images/{:05}.png", img.id);
        to_rgb(&img.image).save(dir.join(&path))?;
        let rec = AnnotationRecord {
            id: img.id,
            path,
            split: img.split,
            boxes: img.boxes.clone(),
            labels: img.labels.clone(),
        };
        serde_json::to_writer(&mut ann, &rec)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let reader = BufReader::new(fs::File::open(dir.join(ANNOTATIONS_FILE))?);
    let mut images = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)?;
        if rec.boxes.len() != rec.labels.len() {
            return Err(Error::Input(format!("image {}: boxes and labels differ in length", rec.id)));
        }
        if let Some(l) = rec.labels.iter().find(|l| manifest.category(l).is_none()) {
            return Err(Error::Input(format!("image {}: label `{l}` not in manifest", rec.id)));
        }
        let rgb = image::open(dir.join(&rec.path))?.to_rgb8();
        images.push(AnnotatedImage {
            id: rec.id,
            split: rec.split,
            image: from_rgb(&rgb),
            boxes: rec.boxes,
            labels: rec.labels,
        });
    }
    Ok(Dataset { manifest, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenerateParams};

    #[test]
    fn dataset_round_trips_and_is_byte_stable() {
        let p = GenerateParams::new(1, 12, 600, 1.2);
        let (m, imgs) = generate_dataset(&p).unwrap();
        let imgs = &imgs[..20];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(a.path(), &m, imgs).unwrap();
        save_dataset(b.path(), &m, imgs).unwrap();
        for name in [MANIFEST_FILE, ANNOTATIONS_FILE, "images/00007.png"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let back = load_dataset(a.path()).unwrap();
        assert_eq!(back.manifest, m);
        assert_eq!(back.images, imgs);
    }
}
