//! FCOS-style assignment of ground-truth boxes to pyramid grid cells.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::model::{level_sizes, STRIDES};
use crate::tensor::Tensor;

/// Per-level grid sizes and strides for a canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidGeometry {
    pub sizes: Vec<(usize, usize)>,
    pub strides: Vec<usize>,
}

impl PyramidGeometry {
    pub fn for_canvas(h: usize, w: usize) -> Self {
        Self {
            sizes: level_sizes(h, w),
            strides: STRIDES.to_vec(),
        }
    }

    /// Image point of cell `(x, y)` on `level`.
    pub fn point(&self, level: usize, x: usize, y: usize) -> (f64, f64) {
        let s = self.strides[level] as f64;
        (s / 2.0 + x as f64 * s, s / 2.0 + y as f64 * s)
    }
}

/// Targets for one level, stored per cell in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub size: (usize, usize),
    /// Bank index of the assigned category, `None` for background.
    pub labels: Vec<Option<usize>>,
    /// Index of the assigned box in the image's annotation list.
    pub assigned_box: Vec<Option<usize>>,
    /// `(l, t, r, b)` distances in pixels; zero on background cells.
    pub reg: Vec<[f64; 4]>,
    /// Centerness target; zero on background cells.
    pub ctr: Vec<f64>,
}

impl LevelTargets {
    fn empty(size: (usize, usize)) -> Self {
        let n = size.0 * size.1;
        Self {
            size,
            labels: vec![None; n],
            assigned_box: vec![None; n],
            reg: vec![[0.0; 4]; n],
            ctr: vec![0.0; n],
        }
    }

    pub fn pos_mask(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }

    pub fn num_pos(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Dense `K × H × W` one-hot classification target.
    pub fn cls_dense(&self, k: usize) -> Tensor {
        let hw = self.size.0 * self.size.1;
        let mut t = Tensor::zeros(&[k, self.size.0, self.size.1]);
        for (j, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                t.data[c * hw + j] = 1.0;
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTargets {
    pub levels: Vec<LevelTargets>,
}

impl GridTargets {
    pub fn num_pos(&self) -> usize {
        self.levels.iter().map(LevelTargets::num_pos).sum()
    }
}

/// `sqrt(min(l,r)/max(l,r) · min(t,b)/max(t,b))`, 0 when a side is degenerate.
pub fn centerness_target(ltrb: [f64; 4]) -> f64 {
    let [l, t, r, b] = ltrb;
    let (mx_lr, mx_tb) = (l.max(r), t.max(b));
    if mx_lr <= 0.0 || mx_tb <= 0.0 {
        return 0.0;
    }
    ((l.min(r) / mx_lr) * (t.min(b) / mx_tb)).max(0.0).sqrt()
}

/// Assigns each cell to the smallest box that strictly contains its point and
/// whose largest side distance falls in the level's `(low, high]` range.
/// Equal areas resolve to the lower box index.
pub fn assign_targets(
    boxes: &[BBox],
    labels: &[String],
    bank_names: &[String],
    geometry: &PyramidGeometry,
    scale_ranges: &[(f64, f64)],
) -> Result<GridTargets> {
    if boxes.len() != labels.len() {
        return Err(Error::Input("boxes and labels differ in length".into()));
    }
    if scale_ranges.len() != geometry.sizes.len() {
        return Err(Error::Config(format!(
            "{} scale ranges for {} levels",
            scale_ranges.len(),
            geometry.sizes.len()
        )));
    }
    let class_of = labels
        .iter()
        .map(|l| {
            bank_names
                .iter()
                .position(|n| n == l)
                .ok_or_else(|| Error::Lookup(format!("label `{l}` is not in the bank")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut levels = Vec::with_capacity(geometry.sizes.len());
    for (lv, (&(h, w), &(low, high))) in geometry.sizes.iter().zip(scale_ranges).enumerate() {
        let mut out = LevelTargets::empty((h, w));
        let mut best_area = vec![f64::INFINITY; h * w];
        let s = geometry.strides[lv] as f64;
        for (bi, b) in boxes.iter().enumerate() {
            let area = b.area();
            // Candidate columns/rows whose points can fall inside the box.
            let x_lo = (((b.x1 - s / 2.0) / s).floor().max(0.0)) as usize;
            let x_hi = ((((b.x2 - s / 2.0) / s).ceil()).max(-1.0) + 1.0).min(w as f64) as usize;
            let y_lo = (((b.y1 - s / 2.0) / s).floor().max(0.0)) as usize;
            let y_hi = ((((b.y2 - s / 2.0) / s).ceil()).max(-1.0) + 1.0).min(h as f64) as usize;
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let (px, py) = geometry.point(lv, x, y);
                    let ltrb = [px - b.x1, py - b.y1, b.x2 - px, b.y2 - py];
                    if ltrb.iter().any(|&d| d <= 0.0) {
                        continue;
                    }
                    let m = ltrb.iter().copied().fold(f64::MIN, f64::max);
                    if !(m > low && m <= high) {
                        continue;
                    }
                    let j = y * w + x;
                    if area < best_area[j] {
                        best_area[j] = area;
                        out.labels[j] = Some(class_of[bi]);
                        out.assigned_box[j] = Some(bi);
                        out.reg[j] = ltrb;
                        out.ctr[j] = centerness_target(ltrb);
                    }
                }
            }
        }
        levels.push(out);
    }
    Ok(GridTargets { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_scale_ranges;

    fn geom() -> PyramidGeometry {
        PyramidGeometry::for_canvas(128, 128)
    }

    #[test]
    fn worked_example_cell_two_two() {
        let names = vec!["a".to_string()];
        let b = BBox::new(8.0, 8.0, 40.0, 40.0);
        let ranges = vec![(0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, f64::INFINITY)];
        let t = assign_targets(&[b], &["a".into()], &names, &geom(), &ranges).unwrap();
        let j = 2 * 16 + 2;
        assert_eq!(geom().point(0, 2, 2), (20.0, 20.0));
        assert_eq!(t.levels[0].labels[j], Some(0));
        assert_eq!(t.levels[0].reg[j], [12.0, 12.0, 20.0, 20.0]);
        assert!(t.levels[1..].iter().all(|l| l.num_pos() == 0));
    }

    #[test]
    fn background_and_unknown_labels() {
        let names = vec!["a".to_string()];
        let r = default_scale_ranges(128.0);
        let t = assign_targets(&[], &[], &names, &geom(), &r).unwrap();
        assert_eq!(t.num_pos(), 0);
        assert!(t.levels[0].cls_dense(1).data.iter().all(|&v| v == 0.0));
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert!(matches!(assign_targets(&[b], &["zz".into()], &names, &geom(), &r), Err(Error::Lookup(_))));
    }

    #[test]
    fn centerness_extremes() {
        assert_eq!(centerness_target([5.0, 5.0, 5.0, 5.0]), 1.0);
        assert_eq!(centerness_target([0.0, 5.0, 10.0, 5.0]), 0.0);
        let c = centerness_target([2.0, 3.0, 8.0, 6.0]);
        assert!((c - (0.25f64 * 0.5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn overlap_prefers_smaller_then_lower_index() {
        let names = vec!["a".to_string(), "b".to_string()];
        let big = BBox::new(0.0, 0.0, 40.0, 40.0);
        let small = BBox::new(10.0, 10.0, 30.0, 30.0);
        let r = vec![(0.0, 64.0); 5];
        let t = assign_targets(&[big, small], &["a".into(), "b".into()], &names, &geom(), &r).unwrap();
        assert_eq!(t.levels[0].labels[2 * 16 + 2], Some(1));
        let twin = BBox::new(10.0, 10.0, 30.0, 30.0);
        let t = assign_targets(&[small, twin], &["a".into(), "b".into()], &names, &geom(), &r).unwrap();
        assert_eq!(t.levels[0].assigned_box[2 * 16 + 2], Some(0));
    }
}
