use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedImage, Bucket, CategoryInfo, CategorySplit, CorpusManifest, DataSplit, SplitCounts};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPES: [&str; 5] = ["rectangle", "ellipse", "triangle", "diamond", "cross"];
pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.86, 0.16, 0.16]),
    ("green", [0.16, 0.78, 0.24]),
    ("blue", [0.20, 0.32, 0.90]),
    ("yellow", [0.90, 0.86, 0.16]),
    ("magenta", [0.82, 0.20, 0.78]),
    ("cyan", [0.16, 0.82, 0.82]),
    ("orange", [0.94, 0.55, 0.12]),
    ("white", [0.94, 0.94, 0.94]),
];
pub const TEXTURES: [&str; 4] = ["solid", "hstripes", "vstripes", "checker"];

const MAX_OBJECTS: usize = 6;
const TEXTURE_PERIOD: usize = 3;

/// Renderable appearance of a category. Its name is `color-texture-shape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Appearance {
    pub shape: usize,
    pub color: usize,
    pub texture: usize,
}

impl Appearance {
    pub fn name(&self) -> String {
        format!(
            "{}-{}-{}",
            COLORS[self.color].0, TEXTURES[self.texture], SHAPES[self.shape]
        )
    }

    pub fn parse(name: &str) -> Option<Appearance> {
        let mut parts = name.split('-');
        let (c, t, s) = (parts.next()?, parts.next()?, parts.next()?);
        if parts.next().is_some() {
            return None;
        }
        Some(Appearance {
            color: COLORS.iter().position(|(n, _)| *n == c)?,
            texture: TEXTURES.iter().position(|n| *n == t)?,
            shape: SHAPES.iter().position(|n| *n == s)?,
        })
    }

    /// Attribute tokens, used by the attribute-informed embedders.
    pub fn attribute_tokens(&self) -> [String; 3] {
        [
            format!("color:{}", COLORS[self.color].0),
            format!("texture:{}", TEXTURES[self.texture]),
            format!("shape:{}", SHAPES[self.shape]),
        ]
    }

    fn covers(&self, u: f64, v: f64) -> bool {
        let (cu, cv) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        match SHAPES[self.shape] {
            "rectangle" => true,
            "ellipse" => cu * cu + cv * cv <= 1.0,
            "triangle" => v >= cu.abs(),
            "diamond" => cu.abs() + cv.abs() <= 1.0,
            "cross" => cu.abs() <= 1.0 / 3.0 || cv.abs() <= 1.0 / 3.0,
            _ => unreachable!(),
        }
    }

    fn dark_texel(&self, dx: usize, dy: usize) -> bool {
        let (bx, by) = (dx / TEXTURE_PERIOD, dy / TEXTURE_PERIOD);
        match TEXTURES[self.texture] {
            "solid" => false,
            "hstripes" => by % 2 == 1,
            "vstripes" => bx % 2 == 1,
            "checker" => (bx + by) % 2 == 1,
            _ => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateParams {
    pub seed: u64,
    pub n_categories: usize,
    pub n_images: usize,
    pub zipf_exponent: f64,
    pub image_size: (usize, usize),
    pub val_fraction: f64,
    /// Zipf scale as a fraction of `n_images`: rank `r` targets `head_fraction·n/r^s` images.
    pub head_fraction: f64,
}

impl GenerateParams {
    pub fn new(seed: u64, n_categories: usize, n_images: usize, zipf_exponent: f64) -> Self {
        Self {
            seed,
            n_categories,
            n_images,
            zipf_exponent,
            image_size: (128, 128),
            val_fraction: 0.2,
            head_fraction: 0.25,
        }
    }
}

fn palette(n: usize) -> Vec<Appearance> {
    let need = (n * 3).div_ceil(2);
    let maxes = [SHAPES.len(), COLORS.len(), TEXTURES.len()];
    let mut dims = [2usize, 2, 1];
    let mut turn = 0;
    while dims.iter().product::<usize>() < need && dims != maxes {
        if dims[turn % 3] < maxes[turn % 3] {
            dims[turn % 3] += 1;
        }
        turn += 1;
    }
    let mut out = Vec::new();
    for shape in 0..dims[0] {
        for color in 0..dims[1] {
            for texture in 0..dims[2] {
                out.push(Appearance { shape, color, texture });
            }
        }
    }
    out
}

/// Deterministic long-tail corpus. Category `r` (1-based rank) targets
/// `head_fraction · n_images / r^s` images; images left without any category
/// receive the head category, so the head absorbs the remainder.
pub fn generate_dataset(params: &GenerateParams) -> Result<(CorpusManifest, Vec<AnnotatedImage>)> {
    let n_cat = params.n_categories;
    let n_img = params.n_images;
    if n_cat < 3 {
        return Err(Error::Generation(format!("need at least 3 categories, got {n_cat}")));
    }
    if n_img < n_cat {
        return Err(Error::Generation(format!("{n_img} images cannot cover {n_cat} categories")));
    }
    let max_cats = SHAPES.len() * COLORS.len() * TEXTURES.len();
    if n_cat > max_cats {
        return Err(Error::Generation(format!("at most {max_cats} distinct appearances")));
    }
    let (h, w) = params.image_size;
    if h < 32 || w < 32 {
        return Err(Error::Generation("image_size below 32 px".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut looks = palette(n_cat);
    looks.shuffle(&mut rng);
    looks.truncate(n_cat);

    let scale = params.head_fraction * n_img as f64;
    let targets: Vec<usize> = (1..=n_cat)
        .map(|r| ((scale / (r as f64).powf(params.zipf_exponent)).round() as usize).clamp(1, n_img))
        .collect();

    let mut cats_of: Vec<Vec<usize>> = vec![Vec::new(); n_img];
    for rank in (1..n_cat).rev() {
        let mut open: Vec<usize> = (0..n_img).filter(|&i| cats_of[i].len() < MAX_OBJECTS).collect();
        open.shuffle(&mut rng);
        for &i in open.iter().take(targets[rank]) {
            cats_of[i].push(rank);
        }
    }
    let mut head_count = 0;
    for cats in cats_of.iter_mut().filter(|c| c.is_empty()) {
        cats.push(0);
        head_count += 1;
    }
    if head_count < targets[0] {
        let mut open: Vec<usize> = (0..n_img)
            .filter(|&i| cats_of[i].len() < MAX_OBJECTS && !cats_of[i].contains(&0))
            .collect();
        open.shuffle(&mut rng);
        for &i in open.iter().take(targets[0] - head_count) {
            cats_of[i].push(0);
        }
    }

    let mut freq = vec![0usize; n_cat];
    for cats in &cats_of {
        for &c in cats {
            freq[c] += 1;
        }
    }
    let buckets: Vec<Bucket> = freq
        .iter()
        .map(|&f| Bucket::from_frequency(f).expect("every category has at least one image"))
        .collect();
    for want in [Bucket::Rare, Bucket::Common, Bucket::Frequent] {
        if !buckets.contains(&want) {
            return Err(Error::Generation(format!(
                "frequencies {freq:?} realise no {want:?} category; adjust zipf exponent or image count"
            )));
        }
    }

    // Half of every rare category's images go to validation so novel classes are measurable.
    let n_val_target = (params.val_fraction * n_img as f64).round() as usize;
    let mut is_val = vec![false; n_img];
    let mut rare: Vec<usize> = (0..n_cat).filter(|&c| buckets[c] == Bucket::Rare).collect();
    rare.sort_by_key(|&c| (freq[c], c));
    for c in rare {
        let mut imgs: Vec<usize> = (0..n_img).filter(|&i| cats_of[i].contains(&c)).collect();
        imgs.shuffle(&mut rng);
        let already = imgs.iter().filter(|&&i| is_val[i]).count();
        let want = freq[c].div_ceil(2);
        let pick: Vec<usize> = imgs
            .iter()
            .copied()
            .filter(|&i| !is_val[i])
            .take(want.saturating_sub(already))
            .collect();
        for i in pick {
            is_val[i] = true;
        }
    }
    let mut rest: Vec<usize> = (0..n_img).filter(|&i| !is_val[i]).collect();
    rest.shuffle(&mut rng);
    let have = is_val.iter().filter(|&&v| v).count();
    for &i in rest.iter().take(n_val_target.saturating_sub(have)) {
        is_val[i] = true;
    }

    let images: Vec<AnnotatedImage> = (0..n_img)
        .map(|i| {
            let split = if is_val[i] { DataSplit::Val } else { DataSplit::Train };
            render_image(params, i, split, &cats_of[i], &looks)
        })
        .collect();

    let n_val = is_val.iter().filter(|&&v| v).count();
    let manifest = CorpusManifest {
        categories: (0..n_cat)
            .map(|c| CategoryInfo {
                name: looks[c].name(),
                image_frequency: freq[c],
                bucket: buckets[c],
                split: CategorySplit::from_bucket(buckets[c]),
            })
            .collect(),
        seed: params.seed,
        zipf_exponent: params.zipf_exponent,
        image_size: params.image_size,
        counts: SplitCounts {
            train: n_img - n_val,
            val: n_val,
        },
    };
    Ok((manifest, images))
}

fn place_boxes(rng: &mut ChaCha8Rng, count: usize, h: usize, w: usize) -> Vec<BBox> {
    let short = h.min(w) as f64;
    let (min_side, max_side) = ((short / 8.0).max(8.0), short * 0.45);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut candidate = BBox::new(0.0, 0.0, 1.0, 1.0);
        for attempt in 0..200 {
            let shrink = if attempt > 100 { 0.6 } else { 1.0 };
            let side = rng.random_range(min_side..max_side) * shrink;
            let aspect: f64 = rng.random_range(0.7..1.43);
            let bw = (side * aspect.sqrt()).round().clamp(4.0, w as f64 - 1.0);
            let bh = (side / aspect.sqrt()).round().clamp(4.0, h as f64 - 1.0);
            let x1 = rng.random_range(0..=(w - bw as usize)) as f64;
            let y1 = rng.random_range(0..=(h - bh as usize)) as f64;
            candidate = BBox::new(x1, y1, x1 + bw, y1 + bh);
            let clear = boxes
                .iter()
                .all(|b| b.intersection(&candidate) <= 0.1 * b.area().min(candidate.area()));
            if clear {
                break;
            }
        }
        boxes.push(candidate);
    }
    boxes
}

fn render_image(
    params: &GenerateParams,
    id: usize,
    split: DataSplit,
    cats: &[usize],
    looks: &[Appearance],
) -> AnnotatedImage {
    let (h, w) = params.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed_1a6e);
    rng.set_stream(id as u64 + 1);

    let mut instances: Vec<usize> = Vec::new();
    for &c in cats {
        instances.push(c);
    }
    for &c in cats {
        if instances.len() < MAX_OBJECTS && rng.random_bool(0.25) {
            instances.push(c);
        }
    }
    instances.shuffle(&mut rng);
    let boxes = place_boxes(&mut rng, instances.len(), h, w);

    let base: f64 = rng.random_range(0.12..0.32);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let (fx, fy) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
    // Phase range is a literal 6.28, not TAU: changing it would change every generated corpus.
    #[allow(clippy::approx_constant)]
    let (px, py) = (rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
    let mut rgb = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let wave = 0.04 * (fx * x as f64 + px).sin() * (fy * y as f64 + py).sin();
            let noise: f64 = rng.random_range(-0.02..0.02);
            for (ch, t) in tint.iter().enumerate() {
                rgb[y * w + x][ch] = base + t + wave + noise;
            }
        }
    }
    for (b, &c) in boxes.iter().zip(&instances) {
        let look = looks[c];
        let gain: f64 = rng.random_range(0.85..1.0);
        let color = COLORS[look.color].1;
        let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
        for y in y1..y2 {
            for x in x1..x2 {
                let u = (x - x1) as f64 / (x2 - x1) as f64 + 0.5 / (x2 - x1) as f64;
                let v = (y - y1) as f64 / (y2 - y1) as f64 + 0.5 / (y2 - y1) as f64;
                if !look.covers(u, v) {
                    continue;
                }
                let shade = if look.dark_texel(x - x1, y - y1) { 0.4 } else { 1.0 };
                for ch in 0..3 {
                    rgb[y * w + x][ch] = color[ch] * gain * shade;
                }
            }
        }
    }
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in rgb.iter().enumerate() {
        for ch in 0..3 {
            let q = (px[ch].clamp(0.0, 1.0) * 255.0).round();
            data[ch * h * w + i] = q / 255.0;
        }
    }
    AnnotatedImage {
        id,
        split,
        image: Tensor::new(vec![3, h, w], data),
        boxes,
        labels: instances.iter().map(|&c| looks[c].name()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenerateParams {
        GenerateParams::new(0, 12, 600, 1.2)
    }

    #[test]
    fn appearance_names_round_trip() {
        let a = Appearance { shape: 2, color: 5, texture: 3 };
        assert_eq!(a.name(), "cyan-checker-triangle");
        assert_eq!(Appearance::parse(&a.name()), Some(a));
        assert_eq!(Appearance::parse("cat"), None);
    }

    #[test]
    fn acceptance_corpus_has_every_bucket_and_exact_counts() {
        let (m, imgs) = generate_dataset(&small()).unwrap();
        assert_eq!(imgs.len(), 600);
        for c in &m.categories {
            let n = imgs.iter().filter(|i| i.labels.contains(&c.name)).count();
            assert_eq!(n, c.image_frequency, "{}", c.name);
            assert_eq!(Some(c.bucket), Bucket::from_frequency(n));
        }
        let buckets: Vec<_> = m.categories.iter().map(|c| c.bucket).collect();
        assert!(buckets.contains(&Bucket::Rare) && buckets.contains(&Bucket::Frequent));
        let names: std::collections::HashSet<_> = m.categories.iter().map(|c| &c.name).collect();
        assert_eq!(names.len(), 12);
        assert_eq!(m.counts.train + m.counts.val, 600);
    }

    #[test]
    fn images_hold_one_to_six_valid_boxes() {
        let (_, imgs) = generate_dataset(&small()).unwrap();
        for img in &imgs {
            assert!((1..=6).contains(&img.boxes.len()));
            assert_eq!(img.boxes.len(), img.labels.len());
            for b in &img.boxes {
                assert!(b.is_valid() && b.x2 <= 128.0 && b.y2 <= 128.0);
            }
            assert!(img.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn frequencies_follow_rank_order_in_the_tail() {
        let (m, _) = generate_dataset(&small()).unwrap();
        for pair in m.categories[1..].windows(2) {
            assert!(pair[0].image_frequency >= pair[1].image_frequency);
        }
    }

    #[test]
    fn flat_zipf_without_rare_bucket_is_rejected() {
        let r = generate_dataset(&GenerateParams::new(0, 12, 600, 0.0));
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn too_few_categories_is_rejected() {
        assert!(generate_dataset(&GenerateParams::new(0, 2, 600, 1.2)).is_err());
        assert!(generate_dataset(&GenerateParams::new(0, 12, 5, 1.2)).is_err());
    }
}
