//! Experiment configuration, loaded from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Short-edge resolution that the full-size scale ranges and resize sizes are given at.
pub const REFERENCE_SHORT_EDGE: f64 = 800.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_grid: f64,
    pub w_image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_grid: 1.0,
            w_image: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// Independent hashed vector per prompt string.
    #[default]
    Hashed,
    /// Vector is a fixed function of the category's rendered attributes.
    AttributeInformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub mode: TextMode,
    pub seed: u64,
    pub templates: Vec<String>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            mode: TextMode::Hashed,
            seed: 7,
            templates: default_templates(),
        }
    }
}

/// Detection-flavoured prompt templates; `{}` is replaced by the category name.
pub fn default_templates() -> Vec<String> {
    [
        "a photo of a {}.",
        "there is a {} in the scene.",
        "a photo of a small {}.",
        "a photo of a large {}.",
        "a cropped photo of a {}.",
        "a close-up photo of a {}.",
        "itap of a {}.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherBackend {
    #[default]
    Seeded,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub backend: TeacherBackend,
    pub seed: u64,
    /// When set, the seeded teacher's category readout shares the attribute
    /// vectors of the attribute-informed text encoder.
    pub attribute_informed: bool,
    pub file: Option<String>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            backend: TeacherBackend::Seeded,
            seed: 13,
            attribute_informed: false,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// `(long edge, short edge)` targets; one entry is fixed-scale, several are a random choice.
    pub sizes: Vec<(f64, f64)>,
    pub crop_min_fraction: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            sizes: vec![scaled_size(1333.0, 800.0, 128.0)],
            crop_min_fraction: None,
        }
    }
}

fn scaled_size(long: f64, short: f64, image_short: f64) -> (f64, f64) {
    let s = image_short / REFERENCE_SHORT_EDGE;
    (long * s, short * s)
}

/// The six-entry multi-scale list rescaled to an image whose short edge is `image_short`.
pub fn multi_scale_sizes(image_short: f64) -> Vec<(f64, f64)> {
    [640.0, 672.0, 704.0, 736.0, 768.0, 800.0]
        .iter()
        .map(|&short| scaled_size(1333.0, short, image_short))
        .collect()
}

/// FCOS object-size ranges per level, rescaled to `image_short`.
pub fn default_scale_ranges(image_short: f64) -> Vec<(f64, f64)> {
    let s = image_short / REFERENCE_SHORT_EDGE;
    vec![
        (0.0, 64.0 * s),
        (64.0 * s, 128.0 * s),
        (128.0 * s, 256.0 * s),
        (256.0 * s, 512.0 * s),
        (512.0 * s, f64::INFINITY),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// `(height, width)` of the model input canvas, in pixels.
    pub image_size: (usize, usize),
    pub backbone_widths: Vec<usize>,
    pub attn_heads: usize,
    pub embed_dim: usize,
    pub teacher_dim: usize,
    pub fpn_channels: usize,
    pub gn_groups: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_multiplier: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub warmup_iters: usize,
    pub warmup_start_factor: f64,
    pub grad_clip_norm: f64,
    pub loss_weights: LossWeights,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub transfer_nms_iou: f64,
    pub max_detections: usize,
    pub pre_nms_topk: usize,
    pub scale_ranges: Vec<(f64, f64)>,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub learnable_tau: bool,
    pub tau_init: f64,
    pub centerness_in_scores: bool,
    pub centerness_weighted_regression: bool,
    pub normalize_alignment: bool,
    pub repeat_threshold: f64,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub augment: AugmentConfig,
    pub text: TextConfig,
    pub teacher: TeacherConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: (128, 128),
            backbone_widths: vec![16, 32, 32, 64, 128],
            attn_heads: 4,
            embed_dim: 32,
            teacher_dim: 64,
            fpn_channels: 32,
            gn_groups: 8,
            epochs: 12,
            batch_size: 8,
            base_lr: 1e-4,
            weight_decay: 1e-4,
            backbone_lr_multiplier: 0.1,
            lr_decay_epochs: vec![8, 11],
            lr_decay_factor: 0.1,
            warmup_iters: 100,
            warmup_start_factor: 0.01,
            grad_clip_norm: 0.1,
            loss_weights: LossWeights::default(),
            score_threshold: 0.05,
            nms_iou: 0.5,
            transfer_nms_iou: 0.6,
            max_detections: 300,
            pre_nms_topk: 1000,
            scale_ranges: default_scale_ranges(128.0),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            learnable_tau: false,
            tau_init: 20.0,
            centerness_in_scores: true,
            centerness_weighted_regression: false,
            normalize_alignment: false,
            repeat_threshold: 0.001,
            pixel_mean: [0.48145466, 0.4578275, 0.40821073],
            pixel_std: [0.26862954, 0.26130258, 0.27577711],
            augment: AugmentConfig::default(),
            text: TextConfig::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Channel width of the grid-feature adapter output (a quarter of the pooled width).
    pub fn adapt_channels(&self) -> usize {
        (self.attn_dim() / 4).max(1)
    }

    /// Width of the attention-pool tokens, equal to the last backbone stage.
    pub fn attn_dim(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be > 0".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor {} not in (0,1)", self.lr_decay_factor));
        }
        if let Some(e) = self.lr_decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return bad(format!("decay epoch {e} is not below epochs {}", self.epochs));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return bad(format!("score_threshold {} not in [0,1)", self.score_threshold));
        }
        for (name, v) in [("nms_iou", self.nms_iou), ("transfer_nms_iou", self.transfer_nms_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} {v} not in (0,1]"));
            }
        }
        if self.max_detections == 0 {
            return bad("max_detections must be > 0".into());
        }
        if self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm must be > 0".into());
        }
        self.validate_scale_ranges()?;
        let (h, w) = self.image_size;
        if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
            return bad(format!("image_size {h}x{w} must be multiples of 32, at least 32"));
        }
        if self.backbone_widths.len() != 5 {
            return bad("backbone_widths needs 5 stage widths".into());
        }
        if self.attn_heads == 0 || !self.attn_dim().is_multiple_of(self.attn_heads) {
            return bad(format!(
                "attention heads {} do not divide width {}",
                self.attn_heads,
                self.attn_dim()
            ));
        }
        if self.gn_groups == 0 || !self.fpn_channels.is_multiple_of(self.gn_groups) {
            return bad(format!("gn_groups {} must divide fpn_channels {}", self.gn_groups, self.fpn_channels));
        }
        if self.teacher_dim < self.embed_dim {
            return bad("teacher_dim must be at least embed_dim".into());
        }
        if self.augment.sizes.is_empty() {
            return bad("augmentation size list is empty".into());
        }
        if !(self.repeat_threshold > 0.0 && self.repeat_threshold < 1.0) {
            return bad("repeat_threshold must lie in (0,1)".into());
        }
        Ok(())
    }

    fn validate_scale_ranges(&self) -> Result<()> {
        let r = &self.scale_ranges;
        if r.len() != 5 {
            return Err(Error::Config(format!("need 5 scale ranges, got {}", r.len())));
        }
        for (i, (lo, hi)) in r.iter().enumerate() {
            if lo >= hi {
                return Err(Error::Config(format!("scale range {i} is empty")));
            }
            if i > 0 && r[i - 1].1 != *lo {
                return Err(Error::Config(format!("scale range {i} is not contiguous")));
            }
        }
        if r[4].1 != f64::INFINITY {
            return Err(Error::Config("last scale range must be unbounded".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_carry_reference_values() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.loss_weights, LossWeights { w_grid: 1.0, w_image: 10.0 });
        assert_eq!((c.score_threshold, c.max_detections, c.nms_iou), (0.05, 300, 0.5));
        assert_eq!(c.transfer_nms_iou, 0.6);
        assert_eq!(c.grad_clip_norm, 0.1);
        assert_eq!(c.adapt_channels() * 4, c.attn_dim());
    }

    #[test]
    fn toml_round_trip_keeps_infinite_range() {
        let c = ExperimentConfig::default();
        let s = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(back.scale_ranges[4].1.is_infinite());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml_str("epochs = 4\nlr_decay_epochs = [2, 3]\n").unwrap();
        assert_eq!(c.epochs, 4);
        assert_eq!(c.embed_dim, 32);
        let c = ExperimentConfig::from_toml_str("[loss_weights]\nw_image = 0.0\n").unwrap();
        assert_eq!(c.loss_weights, LossWeights { w_grid: 1.0, w_image: 0.0 });
    }

    #[test]
    fn rejects_decay_epoch_past_end() {
        let mut c = ExperimentConfig::default();
        c.lr_decay_epochs = vec![12];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_non_contiguous_scale_ranges() {
        let mut c = ExperimentConfig::default();
        c.scale_ranges[2].0 += 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.scale_ranges[4].1 = 1e6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn multi_scale_list_mirrors_reference_sizes() {
        let sizes = multi_scale_sizes(128.0);
        assert_eq!(sizes.len(), 6);
        let s = 128.0 / 800.0;
        assert_eq!(sizes[0], (1333.0 * s, 640.0 * s));
        assert_eq!(sizes[5], (1333.0 * s, 800.0 * s));
    }
}
