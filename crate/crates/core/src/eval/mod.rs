//! Detection metrics and evaluation protocols.

mod analysis;

pub use analysis::{
    category_count_histogram, curve_rows, moving_average_curve, rc_at_k, read_curve_csv, read_histogram_csv,
    read_rc_csv, write_curve_csv, write_histogram_csv, write_rc_csv, CurveRow, HistogramRow, RcReport, RcRow,
    DEFAULT_K_LIST, DEFAULT_WINDOW,
};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::config::ExperimentConfig;
use crate::data::{apply_augmentation, to_canvas, AnnotatedImage, AugmentPolicy, Bucket, CategorySplit, CorpusManifest};
use crate::error::{Error, Result};
use crate::model::{predict, BankRef, GridClip};
use crate::params::ParamStore;
use crate::postprocess::{collect_candidates, finalize, Detection, DetectionRecord, PostprocessSettings};
use crate::targets::PyramidGeometry;
use crate::teacher::{text_space_view, Teacher, TeacherInput};
use crate::text_bank::{extend_bank_open_set, EmbeddingBank, SyntheticTextEncoder};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDetection {
    pub image_id: usize,
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    /// Mean over the IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Area under the monotone precision envelope at one IoU threshold, for one category.
/// Detections are ranked by score (ties keep input order); each takes the
/// highest-IoU unmatched ground truth of its image if that IoU reaches the threshold.
pub fn average_precision(dets: &[ScoredDetection], gts: &[GroundTruth], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(std::cmp::Ordering::Equal));
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.image_id != det.image_id {
                continue;
            }
            let o = iou(&det.bbox, &gt.bbox);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let n_gt = gts.len() as f64;
    let (mut ctp, mut cfp) = (0.0, 0.0);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for t in tp {
        if t {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        recall.push(ctp / n_gt);
        precision.push(ctp / (ctp + cfp));
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Per-category AP; categories without ground truth come back `None`.
pub fn compute_ap(
    dets: &[ScoredDetection],
    gts: &[GroundTruth],
    num_categories: usize,
    thresholds: &[f64],
) -> Vec<Option<CategoryAp>> {
    let mut det_by: Vec<Vec<ScoredDetection>> = vec![Vec::new(); num_categories];
    for d in dets {
        det_by[d.category].push(*d);
    }
    let mut gt_by: Vec<Vec<GroundTruth>> = vec![Vec::new(); num_categories];
    for g in gts {
        gt_by[g.category].push(*g);
    }
    (0..num_categories)
        .map(|c| {
            if gt_by[c].is_empty() {
                return None;
            }
            let at = |t: f64| average_precision(&det_by[c], &gt_by[c], t);
            let ap = thresholds.iter().map(|&t| at(t)).sum::<f64>() / thresholds.len().max(1) as f64;
            Some(CategoryAp {
                ap,
                ap50: at(0.5),
                ap75: at(0.75),
            })
        })
        .collect()
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in vals {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketAp {
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_f: Option<f64>,
    pub ap: Option<f64>,
}

/// Per-bucket and overall means; a bucket without members is `None`.
pub fn bucket_ap(per_category: &[(String, f64)], manifest: &CorpusManifest) -> BucketAp {
    let bucket_of = |n: &str| manifest.category(n).map(|c| c.bucket);
    let of = |b: Bucket| mean(per_category.iter().filter(|(n, _)| bucket_of(n) == Some(b)).map(|(_, v)| *v));
    BucketAp {
        ap_r: of(Bucket::Rare),
        ap_c: of(Bucket::Common),
        ap_f: of(Bucket::Frequent),
        ap: mean(per_category.iter().map(|(_, v)| *v)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub split: CategorySplit,
    pub bucket: Option<Bucket>,
    pub train_frequency: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub mode: String,
    pub bank_hash: String,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub pre_nms_topk: usize,
    pub iou_thresholds: Vec<f64>,
    pub centerness_in_scores: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: BTreeMap<String, CategoryReport>,
    /// Bank categories with no ground truth in the evaluated images.
    pub excluded: Vec<String>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_f: Option<f64>,
    pub ap_base: Option<f64>,
    pub ap_novel: Option<f64>,
    pub ap50_base: Option<f64>,
    pub ap50_novel: Option<f64>,
    pub num_images: usize,
    pub settings: EvalSettings,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Normalised, canvas-padded inference input.
pub fn inference_canvas(img: &AnnotatedImage, config: &ExperimentConfig) -> Result<crate::tensor::Tensor> {
    let policy = AugmentPolicy::inference(config);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let prepared = apply_augmentation(img, &mut rng, &policy)?;
    let (h, w) = config.image_size;
    to_canvas(&prepared.image, h, w)
}

/// Runs the detector on one image.
pub fn detect(
    model: &GridClip,
    store: &ParamStore,
    config: &ExperimentConfig,
    img: &AnnotatedImage,
    bank: &EmbeddingBank,
    settings: &PostprocessSettings,
) -> Result<Vec<Detection>> {
    let rows = bank.matrix_f64();
    let canvas = inference_canvas(img, config)?;
    let out = predict(model, store, &canvas, BankRef { rows: &rows, k: bank.len() })?;
    let (h, w) = config.image_size;
    let geometry = PyramidGeometry::for_canvas(h, w);
    let cands = collect_candidates(&out, &geometry, img.width() as f64, img.height() as f64, settings.use_centerness);
    Ok(finalize(cands, settings))
}

pub fn postprocess_settings(config: &ExperimentConfig, nms_iou: f64) -> PostprocessSettings {
    PostprocessSettings {
        score_threshold: config.score_threshold,
        nms_iou,
        max_detections: config.max_detections,
        pre_nms_topk: config.pre_nms_topk,
        use_centerness: config.centerness_in_scores,
    }
}

/// Detections for every image, in input order.
pub fn run_detection(
    model: &GridClip,
    store: &ParamStore,
    config: &ExperimentConfig,
    images: &[&AnnotatedImage],
    bank: &EmbeddingBank,
    nms_iou: f64,
) -> Result<Vec<DetectionRecord>> {
    let s = postprocess_settings(config, nms_iou);
    images
        .iter()
        .map(|img| Ok(DetectionRecord::new(img.id, &detect(model, store, config, img, bank, &s)?)))
        .collect()
}

/// Scores precomputed detections against the images' annotations. Annotations
/// whose label is not in the bank are ignored.
pub fn evaluate_detections(
    records: &[DetectionRecord],
    images: &[&AnnotatedImage],
    bank: &EmbeddingBank,
    manifest: &CorpusManifest,
    settings: EvalSettings,
) -> Result<EvalReport> {
    let mut gts = Vec::new();
    for img in images {
        for (b, l) in img.boxes.iter().zip(&img.labels) {
            if let Some(c) = bank.index_of(l) {
                gts.push(GroundTruth {
                    image_id: img.id,
                    bbox: *b,
                    category: c,
                });
            }
        }
    }
    let mut dets = Vec::new();
    for r in records {
        for d in r.detections() {
            if d.category >= bank.len() {
                return Err(Error::Input(format!("detection category {} outside bank of {}", d.category, bank.len())));
            }
            dets.push(ScoredDetection {
                image_id: r.image_id,
                bbox: d.bbox,
                score: d.score,
                category: d.category,
            });
        }
    }
    let per = compute_ap(&dets, &gts, bank.len(), &settings.iou_thresholds);
    let mut per_category = BTreeMap::new();
    let mut excluded = Vec::new();
    for (k, ap) in per.iter().enumerate() {
        let name = &bank.names()[k];
        match ap {
            Some(a) => {
                let info = manifest.category(name);
                per_category.insert(
                    name.clone(),
                    CategoryReport {
                        ap: a.ap,
                        ap50: a.ap50,
                        ap75: a.ap75,
                        split: bank.splits()[k],
                        bucket: info.map(|c| c.bucket),
                        train_frequency: info.map(|c| c.image_frequency),
                    },
                );
            }
            None => excluded.push(name.clone()),
        }
    }
    let all: Vec<(String, f64)> = per_category.iter().map(|(n, r)| (n.clone(), r.ap)).collect();
    let buckets = bucket_ap(&all, manifest);
    let split_mean = |s: CategorySplit, f: fn(&CategoryReport) -> f64| {
        mean(per_category.values().filter(|r| r.split == s).map(f))
    };
    Ok(EvalReport {
        ap: buckets.ap,
        ap50: mean(per_category.values().map(|r| r.ap50)),
        ap75: mean(per_category.values().map(|r| r.ap75)),
        ap_r: buckets.ap_r,
        ap_c: buckets.ap_c,
        ap_f: buckets.ap_f,
        ap_base: split_mean(CategorySplit::Base, |r| r.ap),
        ap_novel: split_mean(CategorySplit::Novel, |r| r.ap),
        ap50_base: split_mean(CategorySplit::Base, |r| r.ap50),
        ap50_novel: split_mean(CategorySplit::Novel, |r| r.ap50),
        per_category,
        excluded,
        num_images: images.len(),
        settings,
    })
}

/// Detect with `bank` and score against the images.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &GridClip,
    store: &ParamStore,
    config: &ExperimentConfig,
    images: &[&AnnotatedImage],
    manifest: &CorpusManifest,
    bank: &EmbeddingBank,
    mode: &str,
    nms_iou: f64,
) -> Result<EvalReport> {
    let records = run_detection(model, store, config, images, bank, nms_iou)?;
    let settings = EvalSettings {
        mode: mode.to_string(),
        bank_hash: bank.content_hash(),
        nms_iou,
        score_threshold: config.score_threshold,
        max_detections: config.max_detections,
        pre_nms_topk: config.pre_nms_topk,
        iou_thresholds: coco_iou_thresholds(),
        centerness_in_scores: config.centerness_in_scores,
    };
    evaluate_detections(&records, images, bank, manifest, settings)
}

/// Closed-set evaluation at the configured NMS IoU.
pub fn closed_set_eval(
    model: &GridClip,
    store: &ParamStore,
    config: &ExperimentConfig,
    images: &[&AnnotatedImage],
    manifest: &CorpusManifest,
    bank: &EmbeddingBank,
) -> Result<EvalReport> {
    evaluate(model, store, config, images, manifest, bank, "closed", config.nms_iou)
}

/// Evaluation with novel categories appended to the training bank.
#[allow(clippy::too_many_arguments)]
pub fn open_set_eval(
    model: &GridClip,
    store: &ParamStore,
    config: &ExperimentConfig,
    images: &[&AnnotatedImage],
    manifest: &CorpusManifest,
    base_bank: &EmbeddingBank,
    novel_names: &[String],
    encoder: &SyntheticTextEncoder,
) -> Result<EvalReport> {
    let bank = extend_bank_open_set(base_bank, novel_names, encoder)?;
    let mode = if novel_names.is_empty() { "closed" } else { "open" };
    evaluate(model, store, config, images, manifest, &bank, mode, config.nms_iou)
}

/// Evaluation with the bank swapped for another category list, at the transfer NMS IoU.
pub fn transfer_eval(
    model: &GridClip,
    store: &ParamStore,
    config: &ExperimentConfig,
    images: &[&AnnotatedImage],
    manifest: &CorpusManifest,
    replacement: &EmbeddingBank,
) -> Result<EvalReport> {
    evaluate(model, store, config, images, manifest, replacement, "transfer", config.transfer_nms_iou)
}

/// Image-level embeddings in text space for recall analysis: the teacher's
/// text-space slice, keyed by image id.
pub fn teacher_image_embeddings(
    teacher: &Teacher,
    images: &[&AnnotatedImage],
    embed_dim: usize,
) -> Result<HashMap<usize, Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            let e = teacher.embed(&TeacherInput {
                id: img.id,
                image: &img.image,
                boxes: &img.boxes,
                labels: &img.labels,
            })?;
            if e.len() < embed_dim {
                return Err(Error::Shape(format!("teacher dim {} < embed_dim {embed_dim}", e.len())));
            }
            Ok((img.id, text_space_view(&e, embed_dim).to_vec()))
        })
        .collect()
}

/// Same, from the detector's aligned image embedding.
pub fn model_image_embeddings(
    model: &GridClip,
    store: &ParamStore,
    config: &ExperimentConfig,
    images: &[&AnnotatedImage],
    bank: &EmbeddingBank,
) -> Result<HashMap<usize, Vec<f64>>> {
    let rows = bank.matrix_f64();
    images
        .iter()
        .map(|img| {
            let canvas = inference_canvas(img, config)?;
            let out = predict(model, store, &canvas, BankRef { rows: &rows, k: bank.len() })?;
            Ok((img.id, text_space_view(&out.z_bar_prime, config.embed_dim).to_vec()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: usize, b: BBox) -> GroundTruth {
        GroundTruth {
            image_id: img,
            bbox: b,
            category: 0,
        }
    }

    fn det(img: usize, b: BBox, s: f64) -> ScoredDetection {
        ScoredDetection {
            image_id: img,
            bbox: b,
            score: s,
            category: 0,
        }
    }

    #[test]
    fn ap_worked_examples() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let near = BBox::new(0.0, 0.0, 10.0, 9.0);
        assert!((iou(&g, &near) - 0.9).abs() < 1e-12);
        assert_eq!(average_precision(&[det(0, near, 0.9)], &[gt(0, g)], 0.5), 1.0);
        assert_eq!(average_precision(&[], &[gt(0, g)], 0.5), 0.0);
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        assert_eq!(average_precision(&[det(0, far, 0.95), det(0, g, 0.9)], &[gt(0, g)], 0.5), 0.5);
    }

    #[test]
    fn missing_categories_are_excluded() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = compute_ap(&[det(0, g, 0.9)], &[gt(0, g)], 2, &coco_iou_thresholds());
        assert_eq!(r[0].unwrap().ap, 1.0);
        assert!(r[1].is_none());
    }

    #[test]
    fn thresholds_are_the_ten_coco_values() {
        let t = coco_iou_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }
}
