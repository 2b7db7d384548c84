//! Category text embeddings: prompt templates, ensembling, the synthetic text
//! encoder, and the immutable [`EmbeddingBank`] used to score grid cells.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{TextConfig, TextMode};
use crate::data::{Appearance, CategorySplit, CorpusManifest};
use crate::error::{Error, Result};
use crate::params::hex;

pub const PLACEHOLDER: &str = "{}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    File,
}

/// `K × dim` unit-norm rows stored as `f32`, one per category.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    names: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
    splits: Vec<CategorySplit>,
    provenance: Provenance,
}

impl EmbeddingBank {
    /// Builds a bank, L2-normalising each row.
    pub fn new(
        names: Vec<String>,
        rows: Vec<Vec<f64>>,
        splits: Vec<CategorySplit>,
        provenance: Provenance,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Input("embedding bank needs at least one category".into()));
        }
        if rows.len() != names.len() || splits.len() != names.len() {
            return Err(Error::Shape("names, rows and splits differ in length".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::DuplicateName(dup.clone()));
        }
        let dim = rows[0].len();
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (name, row) in names.iter().zip(&rows) {
            if row.len() != dim {
                return Err(Error::Shape(format!("row for `{name}` has dim {} != {dim}", row.len())));
            }
            let unit = normalize(row).ok_or_else(|| Error::DegenerateEnsemble(name.clone()))?;
            vectors.extend(unit.iter().map(|&v| v as f32));
        }
        Ok(Self {
            names,
            dim,
            vectors,
            splits,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn splits(&self) -> &[CategorySplit] {
        &self.splits
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Row-major `K × dim` copy in `f64` for scoring.
    pub fn matrix_f64(&self) -> Vec<f64> {
        self.vectors.iter().map(|&v| v as f64).collect()
    }

    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        hex(&Sha256::digest(&buf))
    }

    /// `u64 LE header length | JSON header {names, dim, splits, provenance} | f32 LE matrix`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&BankHeader {
            names: self.names.clone(),
            dim: self.dim,
            splits: self.splits.clone(),
            provenance: self.provenance,
        })?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: BankHeader = serde_json::from_slice(&header)?;
        let mut vectors = vec![0f32; h.names.len() * h.dim];
        let mut b = [0u8; 4];
        for v in &mut vectors {
            r.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
        let splits = if h.splits.is_empty() {
            vec![CategorySplit::Base; h.names.len()]
        } else {
            h.splits
        };
        let bank = Self {
            names: h.names,
            dim: h.dim,
            vectors,
            splits,
            provenance: h.provenance,
        };
        bank.check_rows()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    fn check_rows(&self) -> Result<()> {
        if self.names.is_empty() || self.splits.len() != self.names.len() {
            return Err(Error::Input("bank file has no categories or mismatched splits".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::DuplicateName(dup.clone()));
        }
        for k in 0..self.len() {
            let n = self.row(k).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!("bank row `{}` has norm {n}", self.names[k])));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    names: Vec<String>,
    dim: usize,
    #[serde(default)]
    splits: Vec<CategorySplit>,
    provenance: Provenance,
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / n).collect())
}

/// Substitutes `category` into each template. Every template must hold exactly one `{}`.
pub fn build_prompts(category: &str, templates: &[String]) -> Result<Vec<String>> {
    templates
        .iter()
        .map(|t| {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::Config(format!("template `{t}` needs exactly one {PLACEHOLDER}")));
            }
            Ok(t.replacen(PLACEHOLDER, category, 1))
        })
        .collect()
}

/// Mean of the per-prompt rows, L2-normalised.
pub fn ensemble_embeddings(category: &str, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Input(format!("no prompt embeddings for `{category}`")))?;
    let mut mean = vec![0.0; first.len()];
    for r in rows {
        if r.len() != mean.len() {
            return Err(Error::Shape("prompt embeddings differ in dimension".into()));
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    normalize(&mean).ok_or_else(|| Error::DegenerateEnsemble(category.to_string()))
}

/// Unit Gaussian direction seeded by SHA-256 of `(seed, key)`.
pub fn hashed_unit_vector(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&v).expect("gaussian draw is non-zero")
}

/// Hashed embedding of a bare category name.
pub fn synth_category_embed(category: &str, seed: u64, dim: usize) -> Vec<f64> {
    hashed_unit_vector(seed, category, dim)
}

/// Sum of per-attribute directions, normalised. `None` if `category` is not an appearance name.
pub fn attribute_embed(category: &str, seed: u64, dim: usize) -> Option<Vec<f64>> {
    let look = Appearance::parse(category)?;
    let mut acc = vec![0.0; dim];
    for token in look.attribute_tokens() {
        for (a, v) in acc.iter_mut().zip(hashed_unit_vector(seed, &token, dim)) {
            *a += v;
        }
    }
    normalize(&acc)
}

/// Desk-scale stand-in for a text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTextEncoder {
    pub seed: u64,
    pub dim: usize,
    pub mode: TextMode,
    pub templates: Vec<String>,
}

impl SyntheticTextEncoder {
    pub fn from_config(text: &TextConfig, dim: usize) -> Self {
        Self {
            seed: text.seed,
            dim,
            mode: text.mode,
            templates: text.templates.clone(),
        }
    }

    /// Embedding of one prompt. Attribute-informed mode ignores the prompt wording
    /// for parseable category names and falls back to hashing otherwise.
    pub fn embed_prompt(&self, prompt: &str, category: &str) -> Vec<f64> {
        match self.mode {
            TextMode::AttributeInformed => attribute_embed(category, self.seed, self.dim)
                .unwrap_or_else(|| hashed_unit_vector(self.seed, prompt, self.dim)),
            TextMode::Hashed => hashed_unit_vector(self.seed, prompt, self.dim),
        }
    }

    /// `T_k`: prompt ensemble for one category.
    pub fn embed_category(&self, category: &str) -> Result<Vec<f64>> {
        if category.is_empty() {
            return Err(Error::Input("empty category name".into()));
        }
        let prompts = build_prompts(category, &self.templates)?;
        let prompts = if prompts.is_empty() {
            vec![category.to_string()]
        } else {
            prompts
        };
        let rows: Vec<Vec<f64>> = prompts.iter().map(|p| self.embed_prompt(p, category)).collect();
        ensemble_embeddings(category, &rows)
    }

    pub fn build_bank(&self, names: &[String], splits: &[CategorySplit]) -> Result<EmbeddingBank> {
        let rows = names.iter().map(|n| self.embed_category(n)).collect::<Result<Vec<_>>>()?;
        EmbeddingBank::new(names.to_vec(), rows, splits.to_vec(), Provenance::Synthetic)
    }

    /// Bank over the manifest's categories of one split.
    pub fn bank_for_split(&self, manifest: &CorpusManifest, split: CategorySplit) -> Result<EmbeddingBank> {
        let names = manifest.names_with_split(split);
        self.build_bank(&names, &vec![split; names.len()])
    }

    /// Bank over every manifest category, base and novel.
    pub fn bank_for_all(&self, manifest: &CorpusManifest) -> Result<EmbeddingBank> {
        let names = manifest.all_names();
        let splits: Vec<_> = manifest.categories.iter().map(|c| c.split).collect();
        self.build_bank(&names, &splits)
    }
}

/// Appends novel categories. Base rows are copied bit-for-bit.
pub fn extend_bank_open_set(
    base: &EmbeddingBank,
    novel_names: &[String],
    encoder: &SyntheticTextEncoder,
) -> Result<EmbeddingBank> {
    let mut seen: HashSet<&str> = base.names.iter().map(String::as_str).collect();
    for n in novel_names {
        if !seen.insert(n) {
            return Err(Error::DuplicateName(n.clone()));
        }
    }
    if encoder.dim != base.dim && !novel_names.is_empty() {
        return Err(Error::Shape(format!("encoder dim {} != bank dim {}", encoder.dim, base.dim)));
    }
    let mut out = base.clone();
    for n in novel_names {
        let v = encoder.embed_category(n)?;
        out.names.push(n.clone());
        out.vectors.extend(v.iter().map(|&x| x as f32));
        out.splits.push(CategorySplit::Novel);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_templates;
    use proptest::prelude::*;

    fn encoder(mode: TextMode) -> SyntheticTextEncoder {
        SyntheticTextEncoder {
            seed: 1,
            dim: 32,
            mode,
            templates: default_templates(),
        }
    }

    #[test]
    fn prompt_examples() {
        let p = build_prompts("cat", &["a photo of a {}.".to_string()]).unwrap();
        assert_eq!(p, vec!["a photo of a cat.".to_string()]);
        assert!(build_prompts("cat", &[]).unwrap().is_empty());
        let seven = build_prompts("cat", &default_templates()).unwrap();
        assert_eq!(seven.len(), 7);
        assert_eq!(seven[1], "there is a cat in the scene.");
        assert!(matches!(build_prompts("cat", &["no slot".into()]), Err(Error::Config(_))));
        assert!(build_prompts("cat", &["{} and {}".into()]).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let v = ensemble_embeddings("a", &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(v, vec![0.6, 0.8]);
        let e = ensemble_embeddings("a", &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((e[0] - r).abs() < 1e-15 && (e[1] - r).abs() < 1e-15);
        let d = ensemble_embeddings("a", &[vec![1.0, -2.0], vec![-1.0, 2.0]]);
        assert!(matches!(d, Err(Error::DegenerateEnsemble(_))));
    }

    #[test]
    fn hashed_embeddings_are_deterministic_unit_and_spread() {
        let a = synth_category_embed("zebra", 4, 32);
        assert_eq!(a, synth_category_embed("zebra", 4, 32));
        assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        let vs: Vec<Vec<f64>> = (0..100).map(|i| synth_category_embed(&format!("cat{i}"), 4, 32)).collect();
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            for j in i + 1..100 {
                let c: f64 = vs[i].iter().zip(&vs[j]).map(|(x, y)| x * y).sum();
                worst = worst.max(c.abs());
            }
        }
        assert!(worst < 0.8, "max |cos| {worst}");
    }

    #[test]
    fn attribute_mode_relates_shared_attributes() {
        let e = encoder(TextMode::AttributeInformed);
        let a = e.embed_category("red-solid-ellipse").unwrap();
        let b = e.embed_category("red-solid-triangle").unwrap();
        let c = e.embed_category("blue-checker-cross").unwrap();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        assert!(dot(&a, &b) > dot(&a, &c) + 0.3);
    }

    #[test]
    fn open_set_extension_keeps_base_rows_bitwise() {
        let e = encoder(TextMode::Hashed);
        let base = e
            .build_bank(&["a".into(), "b".into()], &[CategorySplit::Base; 2])
            .unwrap();
        let ext = extend_bank_open_set(&base, &["c".into()], &e).unwrap();
        assert_eq!(ext.len(), 3);
        for k in 0..2 {
            let (x, y) = (base.row(k), ext.row(k));
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(ext.splits()[2], CategorySplit::Novel);
        assert_eq!(extend_bank_open_set(&base, &[], &e).unwrap(), base);
        assert!(matches!(extend_bank_open_set(&base, &["a".into()], &e), Err(Error::DuplicateName(_))));
    }

    #[test]
    fn bank_file_round_trips_bitwise() {
        let e = encoder(TextMode::AttributeInformed);
        let bank = e
            .build_bank(&["red-solid-ellipse".into(), "zz".into()], &[CategorySplit::Base, CategorySplit::Novel])
            .unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        let back = EmbeddingBank::read_from(&buf[..]).unwrap();
        assert_eq!(back, bank);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        let e = encoder(TextMode::Hashed);
        assert!(matches!(
            e.build_bank(&["a".into(), "a".into()], &[CategorySplit::Base; 2]),
            Err(Error::DuplicateName(_))
        ));
        assert!(e.build_bank(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn rows_are_unit_norm_on_every_path(names in prop::collection::hash_set("[a-z]{1,8}", 1..6), mode in prop::bool::ANY) {
            let e = encoder(if mode { TextMode::AttributeInformed } else { TextMode::Hashed });
            let names: Vec<String> = names.into_iter().collect();
            let (base, novel) = names.split_at(names.len().div_ceil(2));
            let bank = e.build_bank(base, &vec![CategorySplit::Base; base.len()]).unwrap();
            let ext = extend_bank_open_set(&bank, novel, &e).unwrap();
            let mut buf = Vec::new();
            ext.write_to(&mut buf).unwrap();
            let back = EmbeddingBank::read_from(&buf[..]).unwrap();
            for b in [&bank, &ext, &back] {
                for k in 0..b.len() {
                    let n = b.row(k).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    prop_assert!((n - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
}
