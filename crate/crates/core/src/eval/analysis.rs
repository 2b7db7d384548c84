//! Image-level recall, category statistics and smoothed per-category curves,
//! with CSV emitters for plotting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::data::AnnotatedImage;
use crate::error::{Error, Result};
use crate::text_bank::EmbeddingBank;

pub const DEFAULT_K_LIST: [usize; 3] = [10, 100, 300];
/// Half-width of the `[-10, 10]` smoothing window.
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcRow {
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcReport {
    pub rows: Vec<RcRow>,
    /// Per image (in input order) and per k.
    pub per_image: Vec<(usize, Vec<f64>)>,
    /// Images without any ground-truth category in the bank.
    pub skipped: usize,
}

/// Fraction of each image's ground-truth categories found among the `k`
/// categories closest (cosine) to its embedding, averaged over images.
pub fn rc_at_k(
    embeddings: &HashMap<usize, Vec<f64>>,
    images: &[&AnnotatedImage],
    bank: &EmbeddingBank,
    ks: &[usize],
) -> Result<RcReport> {
    let rows = bank.matrix_f64();
    let d = bank.dim();
    let mut per_image = Vec::new();
    let mut skipped = 0;
    for img in images {
        let gt: BTreeSet<usize> = img.labels.iter().filter_map(|l| bank.index_of(l)).collect();
        if gt.is_empty() {
            skipped += 1;
            continue;
        }
        let e = embeddings
            .get(&img.id)
            .ok_or_else(|| Error::Lookup(format!("no embedding for image {}", img.id)))?;
        if e.len() != d {
            return Err(Error::Shape(format!("embedding dim {} != bank dim {d}", e.len())));
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let mut scored: Vec<(usize, f64)> = (0..bank.len())
            .map(|k| (k, rows[k * d..(k + 1) * d].iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / norm))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        let recalls: Vec<f64> = ks
            .iter()
            .map(|&k| scored.iter().take(k).filter(|(c, _)| gt.contains(c)).count() as f64 / gt.len() as f64)
            .collect();
        per_image.push((img.id, recalls));
    }
    let n = per_image.len().max(1) as f64;
    let rows = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| RcRow {
            k,
            recall: per_image.iter().map(|(_, r)| r[i]).sum::<f64>() / n,
        })
        .collect();
    Ok(RcReport { rows, per_image, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub num_categories: usize,
    pub fraction: f64,
}

/// Share of images containing each number of distinct categories.
pub fn category_count_histogram(images: &[&AnnotatedImage]) -> Vec<HistogramRow> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for img in images {
        *counts.entry(img.distinct_labels().len()).or_default() += 1;
    }
    let n = images.len() as f64;
    counts
        .into_iter()
        .map(|(k, c)| HistogramRow {
            num_categories: k,
            fraction: c as f64 / n,
        })
        .collect()
}

/// Mean over `[i − half, i + half]` clipped to the series.
pub fn moving_average_curve(values: &[f64], half: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub rank: usize,
    pub category: String,
    pub train_frequency: usize,
    pub ap: f64,
    pub smoothed: f64,
}

/// Per-category AP ordered by training-image frequency (ascending, ties by name),
/// with its moving average.
pub fn curve_rows(report: &EvalReport, train_images: &[&AnnotatedImage], half: usize) -> Vec<CurveRow> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for img in train_images {
        for l in img.distinct_labels() {
            *freq.entry(l).or_default() += 1;
        }
    }
    let mut items: Vec<(usize, &String, f64)> = report
        .per_category
        .iter()
        .map(|(n, r)| (freq.get(n.as_str()).copied().unwrap_or(0), n, r.ap))
        .collect();
    items.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
    let raw: Vec<f64> = items.iter().map(|i| i.2).collect();
    let smooth = moving_average_curve(&raw, half);
    items
        .into_iter()
        .zip(smooth)
        .enumerate()
        .map(|(rank, ((f, n, ap), s))| CurveRow {
            rank,
            category: n.clone(),
            train_frequency: f,
            ap,
            smoothed: s,
        })
        .collect()
}

fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T], header: &[&str]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(header)?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|x| x.map_err(Error::from))
        .collect()
}

pub fn write_curve_csv<W: Write>(w: W, rows: &[CurveRow]) -> Result<()> {
    write_rows(w, rows, &["rank", "category", "train_frequency", "ap", "smoothed"])
}

pub fn read_curve_csv<R: Read>(r: R) -> Result<Vec<CurveRow>> {
    read_rows(r)
}

pub fn write_rc_csv<W: Write>(w: W, rows: &[RcRow]) -> Result<()> {
    write_rows(w, rows, &["k", "recall"])
}

pub fn read_rc_csv<R: Read>(r: R) -> Result<Vec<RcRow>> {
    read_rows(r)
}

pub fn write_histogram_csv<W: Write>(w: W, rows: &[HistogramRow]) -> Result<()> {
    write_rows(w, rows, &["num_categories", "fraction"])
}

pub fn read_histogram_csv<R: Read>(r: R) -> Result<Vec<HistogramRow>> {
    read_rows(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::data::{CategorySplit, DataSplit};
    use crate::tensor::Tensor;
    use crate::text_bank::Provenance;

    fn image(id: usize, labels: &[&str]) -> AnnotatedImage {
        AnnotatedImage {
            id,
            split: DataSplit::Val,
            image: Tensor::zeros(&[3, 4, 4]),
            boxes: labels.iter().map(|_| BBox::new(0.0, 0.0, 1.0, 1.0)).collect(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn rc_worked_example() {
        let names: Vec<String> = ["a", "x", "b", "y"].iter().map(|s| s.to_string()).collect();
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.8, 0.6, 0.0],
            vec![0.6, 0.0, 0.8],
            vec![0.0, 0.0, -1.0],
        ];
        let bank = EmbeddingBank::new(names, rows, vec![CategorySplit::Base; 4], Provenance::Synthetic).unwrap();
        let img = image(0, &["a", "b"]);
        let emb = HashMap::from([(0usize, vec![1.0, 0.0, 0.0])]);
        let r = rc_at_k(&emb, &[&img], &bank, &[1, 2, 3, 4]).unwrap();
        let got: Vec<f64> = r.rows.iter().map(|x| x.recall).collect();
        assert_eq!(got, vec![0.5, 0.5, 1.0, 1.0]);
        let empty = image(1, &[]);
        assert_eq!(rc_at_k(&emb, &[&empty], &bank, &[1]).unwrap().skipped, 1);
    }

    #[test]
    fn histogram_examples() {
        let imgs = [image(0, &["a"]), image(1, &["b", "b"]), image(2, &["a", "b"])];
        let refs: Vec<&AnnotatedImage> = imgs.iter().collect();
        let h = category_count_histogram(&refs);
        assert_eq!(h, vec![HistogramRow { num_categories: 1, fraction: 2.0 / 3.0 }, HistogramRow { num_categories: 2, fraction: 1.0 / 3.0 }]);
        assert_eq!(category_count_histogram(&refs[..1]), vec![HistogramRow { num_categories: 1, fraction: 1.0 }]);
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average_curve(&[0.3; 7], 10), vec![0.3; 7]);
        let mut v = vec![0.0; 61];
        v[30] = 21.0;
        let s = moving_average_curve(&v, 10);
        for (i, x) in s.iter().enumerate() {
            let want = if (20..=40).contains(&i) { 1.0 } else { 0.0 };
            assert!((x - want).abs() < 1e-12, "{i}: {x}");
        }
        assert!(moving_average_curve(&[], 10).is_empty());
    }

    #[test]
    fn csv_round_trips_bitwise() {
        let rows = vec![
            HistogramRow { num_categories: 1, fraction: 1.0 / 3.0 },
            HistogramRow { num_categories: 4, fraction: 0.1 + 0.2 },
        ];
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &rows).unwrap();
        let back = read_histogram_csv(&buf[..]).unwrap();
        assert!(back.iter().zip(&rows).all(|(a, b)| a.fraction.to_bits() == b.fraction.to_bits()));
        let mut again = Vec::new();
        write_histogram_csv(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }
}
