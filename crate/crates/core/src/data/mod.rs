//! Synthetic long-tail detection corpus: generation, storage, augmentation and sampling.

mod augment;
mod io;
mod sampling;
mod synth;

pub use augment::{apply_augmentation, normalize_pixels, to_canvas, AugmentPolicy};
pub use io::{load_dataset, save_dataset, Dataset};
pub use sampling::{compute_repeat_factors, sample_epoch_indices, RepeatFactors};
pub use synth::{generate_dataset, Appearance, GenerateParams, COLORS, SHAPES, TEXTURES};

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::tensor::Tensor;

/// Long-tail frequency bucket by number of images containing the category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Rare,
    Common,
    Frequent,
}

impl Bucket {
    /// 1–10 rare, 11–100 common, >100 frequent; zero images has no bucket.
    pub fn from_frequency(images: usize) -> Option<Bucket> {
        match images {
            0 => None,
            1..=10 => Some(Bucket::Rare),
            11..=100 => Some(Bucket::Common),
            _ => Some(Bucket::Frequent),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategorySplit {
    Base,
    Novel,
}

impl CategorySplit {
    /// Rare categories are held out as novel; everything else is base.
    pub fn from_bucket(bucket: Bucket) -> CategorySplit {
        match bucket {
            Bucket::Rare => CategorySplit::Novel,
            _ => CategorySplit::Base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSplit {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub name: String,
    pub image_frequency: usize,
    pub bucket: Bucket,
    pub split: CategorySplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub categories: Vec<CategoryInfo>,
    pub seed: u64,
    pub zipf_exponent: f64,
    pub image_size: (usize, usize),
    pub counts: SplitCounts,
}

impl CorpusManifest {
    pub fn category(&self, name: &str) -> Option<&CategoryInfo> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn names_with_split(&self, split: CategorySplit) -> Vec<String> {
        self.categories
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn all_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }
}

/// One image with its ground truth. Pixels are `3 × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: usize,
    pub split: DataSplit,
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub labels: Vec<String>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.image.shape[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape[2]
    }

    /// Distinct labels in first-appearance order.
    pub fn distinct_labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for l in &self.labels {
            if !out.contains(&l.as_str()) {
                out.push(l);
            }
        }
        out
    }

    /// Copy keeping only annotations whose label passes `keep`.
    pub fn filter_labels(&self, keep: impl Fn(&str) -> bool) -> AnnotatedImage {
        let (boxes, labels) = self
            .boxes
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| keep(l))
            .map(|(b, l)| (*b, l.clone()))
            .unzip();
        AnnotatedImage {
            id: self.id,
            split: self.split,
            image: self.image.clone(),
            boxes,
            labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_five_is_rare_and_novel() {
        let b = Bucket::from_frequency(5).unwrap();
        assert_eq!(b, Bucket::Rare);
        assert_eq!(CategorySplit::from_bucket(b), CategorySplit::Novel);
        assert_eq!(Bucket::from_frequency(50), Some(Bucket::Common));
        assert_eq!(Bucket::from_frequency(500), Some(Bucket::Frequent));
        assert_eq!(Bucket::from_frequency(0), None);
    }

    proptest! {
        #[test]
        fn bucketing_is_the_exact_partition(f in 1usize..100_000) {
            let b = Bucket::from_frequency(f).unwrap();
            let want = if f <= 10 { Bucket::Rare } else if f <= 100 { Bucket::Common } else { Bucket::Frequent };
            prop_assert_eq!(b, want);
            prop_assert_eq!(CategorySplit::from_bucket(b) == CategorySplit::Novel, f <= 10);
        }
    }
}
