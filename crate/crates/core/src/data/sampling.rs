use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{AnnotatedImage, CorpusManifest};
use crate::error::{Error, Result};

/// Per-image repeat factors plus the categories that could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatFactors {
    pub per_image: BTreeMap<usize, f64>,
    pub per_category: BTreeMap<String, f64>,
    /// Manifest categories with zero frequency among the given images.
    pub excluded: Vec<String>,
}

/// `r(c) = max(1, sqrt(t / f(c)))` with `f(c)` the fraction of `images`
/// containing `c`; an image takes the max over its categories (1 if none).
pub fn compute_repeat_factors(
    manifest: &CorpusManifest,
    images: &[&AnnotatedImage],
    threshold: f64,
) -> Result<RepeatFactors> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("repeat threshold {threshold} not in (0,1)")));
    }
    let n = images.len().max(1) as f64;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for img in images {
        for l in img.distinct_labels() {
            *counts.entry(l).or_default() += 1;
        }
    }
    let mut per_category = BTreeMap::new();
    let mut excluded = Vec::new();
    for c in &manifest.categories {
        match counts.get(c.name.as_str()) {
            Some(&k) if k > 0 => {
                let f = k as f64 / n;
                per_category.insert(c.name.clone(), category_repeat_factor(f, threshold));
            }
            _ => excluded.push(c.name.clone()),
        }
    }
    let per_image = images
        .iter()
        .map(|img| {
            let r = img
                .distinct_labels()
                .iter()
                .filter_map(|l| per_category.get(*l))
                .fold(1.0f64, |a, &b| a.max(b));
            (img.id, r)
        })
        .collect();
    Ok(RepeatFactors {
        per_image,
        per_category,
        excluded,
    })
}

pub fn category_repeat_factor(frequency: f64, threshold: f64) -> f64 {
    (threshold / frequency).sqrt().max(1.0)
}

/// Each image appears `floor(r)` times plus once more with probability `frac(r)`; the
/// result is shuffled.
pub fn sample_epoch_indices<R: Rng>(factors: &BTreeMap<usize, f64>, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    for (&id, &r) in factors {
        let whole = r.floor();
        let extra = usize::from(rng.random::<f64>() < r - whole);
        out.extend(std::iter::repeat_n(id, whole as usize + extra));
    }
    out.shuffle(rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn category_factor_examples() {
        assert_eq!(category_repeat_factor(0.001, 0.001), 1.0);
        assert!((category_repeat_factor(0.00025, 0.001) - 2.0).abs() < 1e-12);
        assert_eq!(category_repeat_factor(0.5, 0.001), 1.0);
    }

    #[test]
    fn unit_factors_give_a_permutation() {
        let f: BTreeMap<usize, f64> = (0..50).map(|i| (i, 1.0)).collect();
        let mut s = sample_epoch_indices(&f, &mut ChaCha8Rng::seed_from_u64(1));
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn integer_factor_is_exact() {
        let f: BTreeMap<usize, f64> = [(0, 2.0), (1, 1.0)].into_iter().collect();
        let s = sample_epoch_indices(&f, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(s.iter().filter(|&&i| i == 0).count(), 2);
    }

    #[test]
    fn fractional_factor_has_the_right_mean() {
        let f: BTreeMap<usize, f64> = [(0, 1.5)].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let total: usize = (0..10_000).map(|_| sample_epoch_indices(&f, &mut rng).len()).sum();
        let mean = total as f64 / 10_000.0;
        assert!((mean - 1.5).abs() < 0.05, "mean {mean}");
    }

    proptest! {
        #[test]
        fn factors_at_least_one_and_monotone(f1 in 1e-6..1.0f64, f2 in 1e-6..1.0f64, t in 1e-4..0.9f64) {
            let (a, b) = (category_repeat_factor(f1, t), category_repeat_factor(f2, t));
            prop_assert!(a >= 1.0 && b >= 1.0);
            if f1 <= f2 { prop_assert!(a >= b); }
        }
    }
}
