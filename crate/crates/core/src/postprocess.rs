//! From head outputs to final detections: decode, score, threshold, NMS, cap.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::Result;
use crate::losses::sigmoid;
use crate::model::HeadOutputs;
use crate::targets::PyramidGeometry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
}

/// A scored box before NMS. `spatial` orders cells across levels for tie-breaks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
    pub level: usize,
    pub spatial: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessSettings {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub pre_nms_topk: usize,
    pub use_centerness: bool,
}

/// `(x − l, y − t, x + r, y + b)` clamped to the image.
pub fn decode_boxes(point: (f64, f64), deltas: [f64; 4], width: f64, height: f64) -> BBox {
    let (x, y) = point;
    BBox::new(x - deltas[0], y - deltas[1], x + deltas[2], y + deltas[3]).clamp(width, height)
}

/// `σ(S) · σ(centerness)`, or `σ(S)` alone when centerness is off.
pub fn score_candidates(logit: f64, centerness_logit: f64, use_centerness: bool) -> f64 {
    if use_centerness {
        sigmoid(logit) * sigmoid(centerness_logit)
    } else {
        sigmoid(logit)
    }
}

/// Score descending, then category, then spatial index.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.category.cmp(&b.category))
        .then(a.spatial.cmp(&b.spatial))
}

/// Greedy NMS over score-sorted boxes of one class; returns kept indices.
pub fn nms_per_class(boxes: &[BBox], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if keep.iter().all(|&k| iou(&boxes[k], b) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Threshold, per-level top-k, per-class NMS, global sort and cap.
pub fn finalize(candidates: Vec<Candidate>, s: &PostprocessSettings) -> Vec<Detection> {
    let mut by_level: Vec<Vec<Candidate>> = Vec::new();
    for c in candidates.into_iter().filter(|c| c.score >= s.score_threshold && c.bbox.area() > 0.0) {
        if by_level.len() <= c.level {
            by_level.resize(c.level + 1, Vec::new());
        }
        by_level[c.level].push(c);
    }
    let mut pooled: Vec<Candidate> = Vec::new();
    for mut lv in by_level {
        lv.sort_by(rank);
        lv.truncate(s.pre_nms_topk);
        pooled.extend(lv);
    }
    pooled.sort_by(rank);
    let mut per_class: std::collections::BTreeMap<usize, Vec<Candidate>> = Default::default();
    for c in pooled {
        per_class.entry(c.category).or_default().push(c);
    }
    let mut kept: Vec<Candidate> = Vec::new();
    for (_, cs) in per_class {
        let boxes: Vec<BBox> = cs.iter().map(|c| c.bbox).collect();
        kept.extend(nms_per_class(&boxes, s.nms_iou).into_iter().map(|i| cs[i]));
    }
    kept.sort_by(rank);
    kept.truncate(s.max_detections);
    kept.into_iter()
        .map(|c| Detection {
            bbox: c.bbox,
            score: c.score,
            category: c.category,
        })
        .collect()
}

/// Every (cell, category) pair of a forward pass as a candidate.
pub fn collect_candidates(out: &HeadOutputs, geometry: &PyramidGeometry, width: f64, height: f64, use_centerness: bool) -> Vec<Candidate> {
    let mut cands = Vec::new();
    let mut offset = 0;
    for (lv, &(h, w)) in geometry.sizes.iter().enumerate() {
        let hw = h * w;
        let scores = &out.scores[lv];
        let k = scores.shape[0];
        let deltas = &out.box_deltas[lv].data;
        let ctr = &out.centerness_logits[lv].data;
        for y in 0..h {
            for x in 0..w {
                let j = y * w + x;
                let d = [deltas[j], deltas[hw + j], deltas[2 * hw + j], deltas[3 * hw + j]];
                let bbox = decode_boxes(geometry.point(lv, x, y), d, width, height);
                for c in 0..k {
                    cands.push(Candidate {
                        bbox,
                        score: score_candidates(scores.data[c * hw + j], ctr[j], use_centerness),
                        category: c,
                        level: lv,
                        spatial: offset + j,
                    });
                }
            }
        }
        offset += hw;
    }
    cands
}

/// One JSON line per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl DetectionRecord {
    pub fn new(image_id: usize, dets: &[Detection]) -> Self {
        Self {
            image_id,
            boxes: dets.iter().map(|d| d.bbox).collect(),
            scores: dets.iter().map(|d| d.score).collect(),
            labels: dets.iter().map(|d| d.category).collect(),
        }
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.boxes
            .iter()
            .zip(&self.scores)
            .zip(&self.labels)
            .map(|((&bbox, &score), &category)| Detection { bbox, score, category })
            .collect()
    }
}

pub fn write_detections_jsonl<W: Write>(mut w: W, records: &[DetectionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections_jsonl<R: BufRead>(r: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> PostprocessSettings {
        PostprocessSettings {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 300,
            pre_nms_topk: 1000,
            use_centerness: true,
        }
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_boxes((20.0, 20.0), [5.0, 5.0, 10.0, 10.0], 128.0, 128.0), BBox::new(15.0, 15.0, 30.0, 30.0));
        assert_eq!(decode_boxes((20.0, 20.0), [0.0; 4], 128.0, 128.0).area(), 0.0);
        assert_eq!(decode_boxes((5.0, 120.0), [50.0, 1.0, 1.0, 50.0], 128.0, 128.0), BBox::new(0.0, 119.0, 6.0, 128.0));
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_candidates(0.0, 0.0, true), 0.25);
        assert!(score_candidates(30.0, -800.0, true) < 1e-300);
        let s = score_candidates(-50.0, 50.0, true);
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn nms_worked_example() {
        // B overlaps A with IoU 0.6, C is disjoint.
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12);
        let c = BBox::new(50.0, 50.0, 60.0, 60.0);
        assert_eq!(nms_per_class(&[a, b, c], 0.5), vec![0, 2]);
        assert_eq!(nms_per_class(&[a], 0.5), vec![0]);
        assert!(nms_per_class(&[], 0.5).is_empty());
    }

    fn cand(score: f64, category: usize, spatial: usize) -> Candidate {
        let x = spatial as f64 * 20.0;
        Candidate {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            score,
            category,
            level: 0,
            spatial,
        }
    }

    #[test]
    fn finalize_threshold_cap_and_ties() {
        let low: Vec<Candidate> = (0..10).map(|i| cand(0.04, 0, i)).collect();
        assert!(finalize(low, &settings()).is_empty());
        let many: Vec<Candidate> = (0..400).map(|i| cand(0.1 + i as f64 * 1e-3, 0, i)).collect();
        let out = finalize(many, &settings());
        assert_eq!(out.len(), 300);
        assert!((out[0].score - (0.1 + 399e-3)).abs() < 1e-12);
        assert!((out[299].score - (0.1 + 100e-3)).abs() < 1e-12);
        let tied = vec![cand(0.5, 1, 0), cand(0.5, 0, 3), cand(0.5, 0, 1)];
        let out = finalize(tied, &settings());
        let order: Vec<(usize, f64)> = out.iter().map(|d| (d.category, d.bbox.x1)).collect();
        assert_eq!(order, vec![(0, 20.0), (0, 60.0), (1, 0.0)]);
    }

    #[test]
    fn jsonl_round_trip() {
        let rec = DetectionRecord::new(7, &[Detection { bbox: BBox::new(1.0, 2.0, 3.0, 4.5), score: 0.1 + 0.2, category: 2 }]);
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_detections_jsonl(&buf[..]).unwrap(), vec![rec]);
    }
}
