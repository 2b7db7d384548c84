//! Frozen teacher embedder used as the image-level distillation target.
//!
//! Two backends: a seeded encoder whose output is a fixed readout of the rendered
//! category attributes of the objects in view plus a pooled-pixel projection, and a
//! lookup table of precomputed vectors keyed by image id.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::config::{ExperimentConfig, TeacherBackend};
use crate::data::{Appearance, COLORS, SHAPES, TEXTURES};
use crate::error::{Error, Result};
use crate::params::{normal, ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::text_bank::hashed_unit_vector;

const POOL: usize = 4;
const PIXEL_SCALE: f64 = 0.1;

/// What the teacher is allowed to see of one image.
#[derive(Debug, Clone, Copy)]
pub struct TeacherInput<'a> {
    pub id: usize,
    pub image: &'a Tensor,
    pub boxes: &'a [BBox],
    pub labels: &'a [String],
}

#[derive(Debug, Clone)]
pub enum Teacher {
    Seeded(SeededTeacher),
    File(FileTeacher),
}

impl Teacher {
    pub fn from_config(config: &ExperimentConfig) -> Result<Teacher> {
        match config.teacher.backend {
            TeacherBackend::Seeded => Ok(Teacher::Seeded(SeededTeacher::new(
                config.teacher.seed,
                config.embed_dim,
                config.teacher_dim,
                config.teacher.attribute_informed.then_some(config.text.seed),
            )?)),
            TeacherBackend::File => {
                let path = config
                    .teacher
                    .file
                    .as_ref()
                    .ok_or_else(|| Error::Config("teacher.file required for the file backend".into()))?;
                let t = FileTeacher::load(Path::new(path))?;
                if t.dim != config.teacher_dim {
                    return Err(Error::Config(format!(
                        "teacher file dim {} != teacher_dim {}",
                        t.dim, config.teacher_dim
                    )));
                }
                Ok(Teacher::File(t))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Teacher::Seeded(t) => t.teacher_dim,
            Teacher::File(t) => t.dim,
        }
    }

    pub fn embed(&self, input: &TeacherInput) -> Result<Vec<f64>> {
        match self {
            Teacher::Seeded(t) => t.embed(input),
            Teacher::File(t) => t.lookup(input.id).map(<[f64]>::to_vec),
        }
    }

    /// Hash of the frozen state; constant for the lifetime of a run.
    pub fn content_hash(&self) -> String {
        match self {
            Teacher::Seeded(t) => t.params.content_hash(),
            Teacher::File(t) => t.content_hash(),
        }
    }
}

/// Seeded stand-in for a pretrained image encoder.
#[derive(Debug, Clone)]
pub struct SeededTeacher {
    pub embed_dim: usize,
    pub teacher_dim: usize,
    params: ParamStore,
}

impl SeededTeacher {
    /// `text_seed` set means attribute-informed: the attribute table is shared with
    /// the text encoder, so the first `embed_dim` outputs live in text space.
    pub fn new(seed: u64, embed_dim: usize, teacher_dim: usize, text_seed: Option<u64>) -> Result<Self> {
        if teacher_dim < embed_dim {
            return Err(Error::Config(format!(
                "teacher_dim {teacher_dim} must be >= embed_dim {embed_dim}"
            )));
        }
        let tokens = all_attribute_tokens();
        let mut table = Vec::with_capacity(tokens.len() * embed_dim);
        for t in &tokens {
            let v = match text_seed {
                Some(s) => hashed_unit_vector(s, t, embed_dim),
                None => hashed_unit_vector(seed, &format!("teacher/{t}"), embed_dim),
            };
            table.extend(v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extra = teacher_dim - embed_dim;
        let fan_in = 3 * POOL * POOL;
        let proj = normal(&mut rng, &[extra, fan_in], 1.0 / (fan_in as f64).sqrt());
        let mut params = ParamStore::new();
        params.add("teacher.attr_table", ParamGroup::Head, Tensor::new(vec![tokens.len(), embed_dim], table));
        params.add("teacher.pixel_proj", ParamGroup::Head, proj);
        Ok(Self {
            embed_dim,
            teacher_dim,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Category direction from the attribute table, normalised; unknown names fall
    /// back to a hashed direction.
    pub fn category_vector(&self, name: &str) -> Vec<f64> {
        let Some(look) = Appearance::parse(name) else {
            return hashed_unit_vector(0, &format!("teacher/name/{name}"), self.embed_dim);
        };
        let table = &self.params.iter().next().expect("attr table").1.value.data;
        let rows = [
            look.color,
            COLORS.len() + look.texture,
            COLORS.len() + TEXTURES.len() + look.shape,
        ];
        let mut acc = vec![0.0; self.embed_dim];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(&table[r * self.embed_dim..(r + 1) * self.embed_dim]) {
                *a += v;
            }
        }
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        acc.iter().map(|x| x / n).collect()
    }

    /// `[Σ_obj w_obj · v(category); 0.1 · P · pool4x4(pixels)]`, with `w_obj` the
    /// object's share of the total annotated area.
    pub fn embed(&self, input: &TeacherInput) -> Result<Vec<f64>> {
        let img = input.image;
        if img.shape.len() != 3 || img.shape[0] != 3 {
            return Err(Error::Shape(format!("teacher expects 3xHxW, got {:?}", img.shape)));
        }
        if input.boxes.len() != input.labels.len() {
            return Err(Error::Input("boxes and labels differ in length".into()));
        }
        let mut out = vec![0.0; self.teacher_dim];
        let total: f64 = input.boxes.iter().map(BBox::area).sum();
        if total > 0.0 {
            for (b, l) in input.boxes.iter().zip(input.labels) {
                let w = b.area() / total;
                for (o, v) in out.iter_mut().zip(self.category_vector(l)) {
                    *o += w * v;
                }
            }
        }
        let pooled = pool_pixels(img);
        let proj = &self.params.iter().nth(1).expect("pixel proj").1.value;
        let fan_in = pooled.len();
        for (r, o) in out[self.embed_dim..].iter_mut().enumerate() {
            let row = &proj.data[r * fan_in..(r + 1) * fan_in];
            *o = PIXEL_SCALE * row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(out)
    }
}

fn all_attribute_tokens() -> Vec<String> {
    COLORS
        .iter()
        .map(|(c, _)| format!("color:{c}"))
        .chain(TEXTURES.iter().map(|t| format!("texture:{t}")))
        .chain(SHAPES.iter().map(|s| format!("shape:{s}")))
        .collect()
}

/// Mean over a 4×4 grid of roughly equal cells per channel.
fn pool_pixels(img: &Tensor) -> Vec<f64> {
    let (c, h, w) = img.chw();
    let mut out = vec![0.0; c * POOL * POOL];
    for ch in 0..c {
        for gy in 0..POOL {
            let (y0, y1) = (gy * h / POOL, ((gy + 1) * h / POOL).max(gy * h / POOL + 1).min(h));
            for gx in 0..POOL {
                let (x0, x1) = (gx * w / POOL, ((gx + 1) * w / POOL).max(gx * w / POOL + 1).min(w));
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += img.data[(ch * h + y) * w + x];
                    }
                }
                out[(ch * POOL + gy) * POOL + gx] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

/// Precomputed embeddings: a JSON object mapping image id to a vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FileTeacher {
    pub dim: usize,
    table: BTreeMap<usize, Vec<f64>>,
}

impl FileTeacher {
    pub fn new(table: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::Input("teacher table is empty".into()))?;
        if let Some((id, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Shape(format!("teacher vector for image {id} has dim {}", v.len())));
        }
        Ok(Self { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: BTreeMap<String, Vec<f64>> = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let mut table = BTreeMap::new();
        for (k, v) in raw {
            let id = k
                .parse::<usize>()
                .map_err(|_| Error::Input(format!("teacher table key `{k}` is not an image id")))?;
            table.insert(id, v);
        }
        Self::new(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: BTreeMap<String, &Vec<f64>> = self.table.iter().map(|(k, v)| (k.to_string(), v)).collect();
        serde_json::to_writer(std::io::BufWriter::new(std::fs::File::create(path)?), &raw)?;
        Ok(())
    }

    pub fn lookup(&self, id: usize) -> Result<&[f64]> {
        self.table
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no teacher embedding for image {id}")))
    }

    fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in &self.table {
            h.update((*k as u64).to_le_bytes());
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        crate::params::hex(&h.finalize())
    }
}

/// First `embed_dim` components: the part of a seeded teacher embedding that lives in text space.
pub fn text_space_view(embedding: &[f64], embed_dim: usize) -> &[f64] {
    &embedding[..embed_dim.min(embedding.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenerateParams};

    fn input<'a>(img: &'a crate::data::AnnotatedImage) -> TeacherInput<'a> {
        TeacherInput {
            id: img.id,
            image: &img.image,
            boxes: &img.boxes,
            labels: &img.labels,
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let (_, imgs) = generate_dataset(&GenerateParams::new(3, 12, 600, 1.2)).unwrap();
        let t = SeededTeacher::new(13, 32, 64, None).unwrap();
        let a = t.embed(&input(&imgs[0])).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, t.embed(&input(&imgs[0])).unwrap());
    }

    #[test]
    fn differing_object_sets_give_distinct_embeddings() {
        let (_, imgs) = generate_dataset(&GenerateParams::new(3, 12, 600, 1.2)).unwrap();
        let t = SeededTeacher::new(13, 32, 64, Some(7)).unwrap();
        let embs: Vec<Vec<f64>> = imgs.iter().take(80).map(|i| t.embed(&input(i)).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let (mut a, mut b) = (imgs[i].distinct_labels(), imgs[j].distinct_labels());
                a.sort();
                b.sort();
                if a == b {
                    continue;
                }
                let dot: f64 = embs[i].iter().zip(&embs[j]).map(|(x, y)| x * y).sum();
                let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(dot / (n(&embs[i]) * n(&embs[j])) < 0.99, "images {i} and {j}");
            }
        }
    }

    #[test]
    fn attribute_informed_view_matches_text_space() {
        let t = SeededTeacher::new(13, 32, 64, Some(7)).unwrap();
        let name = "red-solid-ellipse";
        let want = crate::text_bank::attribute_embed(name, 7, 32).unwrap();
        let got = t.category_vector(name);
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn file_backend_lookup_and_missing_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(&path, r#"{"0": [1.0, 2.0], "5": [3.0, 4.0]}"#).unwrap();
        let t = FileTeacher::load(&path).unwrap();
        assert_eq!(t.lookup(5).unwrap(), &[3.0, 4.0]);
        assert!(matches!(t.lookup(1), Err(Error::Lookup(_))));
        t.save(&path).unwrap();
        assert_eq!(FileTeacher::load(&path).unwrap(), t);
    }
}
