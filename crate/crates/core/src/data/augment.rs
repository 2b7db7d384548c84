use rand::Rng;

use super::AnnotatedImage;
use crate::boxes::BBox;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    /// `(long edge, short edge)` resize targets.
    pub sizes: Vec<(f64, f64)>,
    /// Minimum kept fraction of each edge when cropping; `None` disables cropping.
    pub crop_min_fraction: Option<f64>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl AugmentPolicy {
    pub fn from_config(c: &ExperimentConfig) -> Self {
        Self {
            flip_prob: c.augment.flip_prob,
            sizes: c.augment.sizes.clone(),
            crop_min_fraction: c.augment.crop_min_fraction,
            mean: c.pixel_mean,
            std: c.pixel_std,
        }
    }

    /// Identity geometry: no flip, size that leaves `h × w` untouched.
    pub fn inference(c: &ExperimentConfig) -> Self {
        let (h, w) = c.image_size;
        Self {
            flip_prob: 0.0,
            sizes: vec![(h.max(w) as f64, h.min(w) as f64)],
            crop_min_fraction: None,
            mean: c.pixel_mean,
            std: c.pixel_std,
        }
    }
}

/// Flip, resize, optional crop, then per-channel normalisation. The returned
/// pixels are normalised; boxes stay valid and inside the image.
pub fn apply_augmentation<R: Rng>(img: &AnnotatedImage, rng: &mut R, policy: &AugmentPolicy) -> Result<AnnotatedImage> {
    if policy.sizes.is_empty() {
        return Err(Error::Config("augmentation size list is empty".into()));
    }
    let mut out = img.clone();
    let flip = rng.random::<f64>() < policy.flip_prob;
    if flip {
        out = flip_horizontal(&out);
    }
    let (long, short) = policy.sizes[rng.random_range(0..policy.sizes.len())];
    out = resize_to(&out, long, short);
    if let Some(bound) = policy.crop_min_fraction {
        if !(0.0..=1.0).contains(&bound) {
            return Err(Error::Config(format!("crop fraction {bound} not in [0,1]")));
        }
        let (h, w) = (out.height(), out.width());
        let ch = ((rng.random_range(bound..=1.0) * h as f64).round() as usize).clamp(1, h);
        let cw = ((rng.random_range(bound..=1.0) * w as f64).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        out = crop(&out, y0, x0, ch, cw);
    }
    out.image = normalize_pixels(&out.image, &policy.mean, &policy.std);
    Ok(out)
}

pub fn normalize_pixels(img: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Tensor {
    let (c, h, w) = img.chw();
    let mut out = img.clone();
    for ch in 0..c.min(3) {
        for v in &mut out.data[ch * h * w..(ch + 1) * h * w] {
            *v = (*v - mean[ch]) / std[ch];
        }
    }
    out
}

/// Zero-pads a map on the bottom/right to `h × w`.
pub fn to_canvas(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, ih, iw) = img.chw();
    if ih > h || iw > w {
        return Err(Error::Input(format!("image {ih}x{iw} exceeds canvas {h}x{w}")));
    }
    if ih == h && iw == w {
        return Ok(img.clone());
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ih {
            let src = (ch * ih + y) * iw;
            let dst = (ch * h + y) * w;
            out[dst..dst + iw].copy_from_slice(&img.data[src..src + iw]);
        }
    }
    Ok(Tensor::new(vec![c, h, w], out))
}

fn retain_valid(boxes: Vec<BBox>, labels: Vec<String>, w: f64, h: f64) -> (Vec<BBox>, Vec<String>) {
    boxes
        .into_iter()
        .zip(labels)
        .map(|(b, l)| (b.clamp(w, h), l))
        .filter(|(b, _)| b.is_valid())
        .unzip()
}

pub fn flip_horizontal(img: &AnnotatedImage) -> AnnotatedImage {
    let (c, h, w) = img.image.chw();
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(ch * h + y) * w + x] = img.image.data[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    let wf = w as f64;
    AnnotatedImage {
        id: img.id,
        split: img.split,
        image: Tensor::new(vec![c, h, w], data),
        boxes: img
            .boxes
            .iter()
            .map(|b| BBox::new(wf - b.x2, b.y1, wf - b.x1, b.y2))
            .collect(),
        labels: img.labels.clone(),
    }
}

/// Aspect-preserving bilinear resize so the long edge is ≤ `long` and the short edge ≤ `short`.
pub fn resize_to(img: &AnnotatedImage, long: f64, short: f64) -> AnnotatedImage {
    let (c, h, w) = img.image.chw();
    let scale = (long / h.max(w) as f64).min(short / h.min(w) as f64);
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    if nh == h && nw == w {
        return img.clone();
    }
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut data = vec![0.0; c * nh * nw];
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| img.image.data[(ch * h + yy) * w + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                data[(ch * nh + y) * nw + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    let (ry, rx) = (nh as f64 / h as f64, nw as f64 / w as f64);
    let boxes = img
        .boxes
        .iter()
        .map(|b| BBox::new(b.x1 * rx, b.y1 * ry, b.x2 * rx, b.y2 * ry))
        .collect();
    let (boxes, labels) = retain_valid(boxes, img.labels.clone(), nw as f64, nh as f64);
    AnnotatedImage {
        id: img.id,
        split: img.split,
        image: Tensor::new(vec![c, nh, nw], data),
        boxes,
        labels,
    }
}

pub fn crop(img: &AnnotatedImage, y0: usize, x0: usize, ch_: usize, cw: usize) -> AnnotatedImage {
    let (c, h, w) = img.image.chw();
    assert!(y0 + ch_ <= h && x0 + cw <= w);
    let mut data = vec![0.0; c * ch_ * cw];
    for ch in 0..c {
        for y in 0..ch_ {
            let src = (ch * h + y0 + y) * w + x0;
            let dst = (ch * ch_ + y) * cw;
            data[dst..dst + cw].copy_from_slice(&img.image.data[src..src + cw]);
        }
    }
    let (fx, fy) = (x0 as f64, y0 as f64);
    let boxes = img
        .boxes
        .iter()
        .map(|b| BBox::new(b.x1 - fx, b.y1 - fy, b.x2 - fx, b.y2 - fy))
        .collect();
    let (boxes, labels) = retain_valid(boxes, img.labels.clone(), cw as f64, ch_ as f64);
    AnnotatedImage {
        id: img.id,
        split: img.split,
        image: Tensor::new(vec![c, ch_, cw], data),
        boxes,
        labels,
    }
}
