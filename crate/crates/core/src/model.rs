//! The detector: conv backbone, attention pooling, grid adapter, FPN fusion,
//! FCOS-style towers with cosine scoring, and the image-level alignment head.
//!
//! Parameters live in a [`ParamStore`]; [`GridClip`] only holds their ids, so the
//! same structure can be rebound to a loaded checkpoint with [`GridClip::bind`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, normal, uniform_bias, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const STRIDES: [usize; 5] = [8, 16, 32, 64, 128];
pub const NUM_LEVELS: usize = 5;
pub const TOWER_DEPTH: usize = 4;
pub const COSINE_EPS: f64 = 1e-8;
const GN_EPS: f64 = 1e-5;
const FINAL_STD: f64 = 0.01;

/// Spatial size of each pyramid level for an `h × w` canvas (stride-2 convs round up).
pub fn level_sizes(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(NUM_LEVELS);
    let (mut lh, mut lw) = (h, w);
    for s in 0..7 {
        lh = lh.div_ceil(2);
        lw = lw.div_ceil(2);
        if s >= 2 {
            out.push((lh, lw));
        }
    }
    out
}

enum Init {
    He(usize),
    Bias(usize),
    Normal(f64),
    Const(f64),
}

enum Source<'a> {
    Fresh {
        store: &'a mut ParamStore,
        rng: ChaCha8Rng,
    },
    Bound(&'a ParamStore),
}

impl Source<'_> {
    fn take(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: Init) -> Result<ParamId> {
        match self {
            Source::Fresh { store, rng } => {
                let n: usize = shape.iter().product();
                let t = match init {
                    Init::He(fan_in) => kaiming_uniform(rng, shape, fan_in),
                    Init::Bias(fan_in) => uniform_bias(rng, n, fan_in).reshaped(shape),
                    Init::Normal(std) => normal(rng, shape, std),
                    Init::Const(c) => Tensor::full(shape, c),
                };
                Ok(store.add(name, group, t))
            }
            Source::Bound(store) => {
                let id = store
                    .find(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
                let got = &store.value(id).shape;
                if got.as_slice() != shape {
                    return Err(Error::Checkpoint(format!("parameter `{name}` has shape {got:?}, want {shape:?}")));
                }
                Ok(id)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn build(
        src: &mut Source,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        final_layer: bool,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let (wi, bi) = if final_layer {
            (Init::Normal(FINAL_STD), Init::Const(0.0))
        } else {
            (Init::He(fan_in), Init::Bias(fan_in))
        };
        Ok(Self {
            w: src.take(&format!("{name}.weight"), group, &[cout, cin, k, k], wi)?,
            b: src.take(&format!("{name}.bias"), group, &[cout], bi)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn build(src: &mut Source, name: &str, group: ParamGroup, din: usize, dout: usize, final_layer: bool) -> Result<Self> {
        let (wi, bi) = if final_layer {
            (Init::Normal(FINAL_STD), Init::Const(0.0))
        } else {
            (Init::He(din), Init::Bias(din))
        };
        Ok(Self {
            w: src.take(&format!("{name}.weight"), group, &[dout, din], wi)?,
            b: src.take(&format!("{name}.bias"), group, &[dout], bi)?,
        })
    }

    /// `x: N × in → N × out`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

/// 3×3 conv, group norm, ReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TowerBlock {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPool {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub pos: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub grid: (usize, usize),
}

/// Ids of every learnable tensor plus the static dimensions needed to run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridClip {
    pub canvas: (usize, usize),
    pub embed_dim: usize,
    pub teacher_dim: usize,
    pub gn_groups: usize,
    pub backbone: Vec<Conv>,
    pub pool: AttentionPool,
    pub adapter: [Conv; 3],
    pub lateral: [Conv; 3],
    pub smooth: [Conv; 3],
    pub p6: Conv,
    pub p7: Conv,
    pub cls_tower: Vec<TowerBlock>,
    pub cls_out: Conv,
    pub box_tower: Vec<TowerBlock>,
    pub box_out: Conv,
    pub ctr_out: Conv,
    pub level_scales: Vec<ParamId>,
    pub tau: Option<ParamId>,
    pub image_head: [Linear; 3],
}

/// Backbone outputs at strides 8/16/32.
#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

/// `z̄` (`D`) and `z` (`D × H5 × W5`) from one attention pass.
#[derive(Debug, Clone, Copy)]
pub struct PooledVars {
    pub z_bar: Var,
    pub z: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    pub grid: Var,
    pub scores: Option<Var>,
    pub deltas: Var,
    pub centerness: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub backbone: BackboneVars,
    pub pooled: PooledVars,
    pub z_prime: Var,
    pub pyramid: Vec<Var>,
    pub levels: Vec<LevelVars>,
    pub z_bar_prime: Var,
}

/// Category matrix the grid embeddings are scored against (`k × embed_dim`, unit rows).
#[derive(Debug, Clone, Copy)]
pub struct BankRef<'a> {
    pub rows: &'a [f64],
    pub k: usize,
}

impl GridClip {
    /// Fresh parameters, seeded from `config.seed`.
    pub fn init(config: &ExperimentConfig) -> Result<(GridClip, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Self::build(
            config,
            &mut Source::Fresh {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(config.seed),
            },
        )?;
        Ok((model, store))
    }

    /// Rebinds the structure to an existing store by parameter name.
    pub fn bind(config: &ExperimentConfig, store: &ParamStore) -> Result<GridClip> {
        config.validate()?;
        Self::build(config, &mut Source::Bound(store))
    }

    fn build(config: &ExperimentConfig, src: &mut Source) -> Result<GridClip> {
        let bb = ParamGroup::Backbone;
        let hd = ParamGroup::Head;
        let widths = &config.backbone_widths;
        let mut backbone = Vec::with_capacity(widths.len());
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            backbone.push(Conv::build(src, &format!("backbone.{i}"), bb, cin, w, 3, 2, false)?);
            cin = w;
        }
        let d = config.attn_dim();
        let (h, w) = config.image_size;
        let grid = (h / 32, w / 32);
        let pool = AttentionPool {
            q: Linear::build(src, "pool.q", bb, d, d, false)?,
            k: Linear::build(src, "pool.k", bb, d, d, false)?,
            v: Linear::build(src, "pool.v", bb, d, d, false)?,
            o: Linear::build(src, "pool.o", bb, d, d, false)?,
            pos: src.take("pool.pos", bb, &[1 + grid.0 * grid.1, d], Init::Const(0.0))?,
            heads: config.attn_heads,
            dim: d,
            grid,
        };
        let a = config.adapt_channels();
        let adapter = [
            Conv::build(src, "adapter.0", hd, d, a, 3, 1, false)?,
            Conv::build(src, "adapter.1", hd, a, a, 3, 1, false)?,
            Conv::build(src, "adapter.2", hd, a, a, 3, 1, false)?,
        ];
        let f = config.fpn_channels;
        let c3 = widths[widths.len() - 3];
        let c4 = widths[widths.len() - 2];
        let lateral = [
            Conv::build(src, "fpn.lateral3", hd, c3, f, 1, 1, false)?,
            Conv::build(src, "fpn.lateral4", hd, c4, f, 1, 1, false)?,
            Conv::build(src, "fpn.lateral5", hd, a + d, f, 1, 1, false)?,
        ];
        let smooth = [
            Conv::build(src, "fpn.smooth3", hd, f, f, 3, 1, false)?,
            Conv::build(src, "fpn.smooth4", hd, f, f, 3, 1, false)?,
            Conv::build(src, "fpn.smooth5", hd, f, f, 3, 1, false)?,
        ];
        let p6 = Conv::build(src, "fpn.p6", hd, f, f, 3, 2, false)?;
        let p7 = Conv::build(src, "fpn.p7", hd, f, f, 3, 2, false)?;
        let tower = |src: &mut Source, prefix: &str| -> Result<Vec<TowerBlock>> {
            (0..TOWER_DEPTH)
                .map(|i| {
                    Ok(TowerBlock {
                        conv: Conv::build(src, &format!("{prefix}.{i}"), hd, f, f, 3, 1, false)?,
                        gamma: src.take(&format!("{prefix}.{i}.gn.weight"), hd, &[f], Init::Const(1.0))?,
                        beta: src.take(&format!("{prefix}.{i}.gn.bias"), hd, &[f], Init::Const(0.0))?,
                    })
                })
                .collect()
        };
        let cls_tower = tower(src, "head.cls_tower")?;
        let box_tower = tower(src, "head.box_tower")?;
        let cls_out = Conv::build(src, "head.cls_out", hd, f, config.embed_dim, 3, 1, true)?;
        let box_out = Conv::build(src, "head.box_out", hd, f, 4, 3, 1, true)?;
        let ctr_out = Conv::build(src, "head.ctr_out", hd, f, 1, 3, 1, true)?;
        let level_scales = (0..NUM_LEVELS)
            .map(|i| src.take(&format!("head.scale{i}"), hd, &[1], Init::Const(1.0)))
            .collect::<Result<Vec<_>>>()?;
        let tau = if config.learnable_tau {
            Some(src.take("head.tau", hd, &[1], Init::Const(config.tau_init))?)
        } else {
            None
        };
        let image_head = [
            Linear::build(src, "image_head.0", hd, d, d, false)?,
            Linear::build(src, "image_head.1", hd, d, d, false)?,
            Linear::build(src, "image_head.2", hd, d, config.teacher_dim, true)?,
        ];
        Ok(GridClip {
            canvas: config.image_size,
            embed_dim: config.embed_dim,
            teacher_dim: config.teacher_dim,
            gn_groups: config.gn_groups,
            backbone,
            pool,
            adapter,
            lateral,
            smooth,
            p6,
            p7,
            cls_tower,
            cls_out,
            box_tower,
            box_out,
            ctr_out,
            level_scales,
            tau,
            image_head,
        })
    }

    /// Stride-2 conv stages with ReLU; the last three are C3, C4, C5.
    pub fn backbone_forward(&self, g: &mut Graph, image: Var) -> Result<BackboneVars> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Input(format!("image must be 3×H×W, got {s:?}")));
        }
        if s[1] < 32 || s[2] < 32 {
            return Err(Error::Input(format!("image {}×{} is smaller than 32×32", s[1], s[2])));
        }
        if !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) {
            return Err(Error::Input(format!("image {}×{} is not padded to a multiple of 32", s[1], s[2])));
        }
        let mut x = image;
        let mut stages = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let y = conv.apply(g, x);
            x = g.relu(y);
            stages.push(x);
        }
        let n = stages.len();
        Ok(BackboneVars {
            c3: stages[n - 3],
            c4: stages[n - 2],
            c5: stages[n - 1],
        })
    }

    /// Token sequence `[mean(C5); flatten(C5)] + pos` through multi-head self-attention.
    pub fn attention_pool(&self, g: &mut Graph, c5: Var) -> Result<PooledVars> {
        let p = &self.pool;
        let (d, h, w) = g.value(c5).chw();
        if d != p.dim || (h, w) != p.grid {
            return Err(Error::Shape(format!(
                "attention pool built for {}×{}×{}, got {d}×{h}×{w}",
                p.dim, p.grid.0, p.grid.1
            )));
        }
        if p.heads == 0 || d % p.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide dim {d}", p.heads)));
        }
        let hw = h * w;
        let mean = g.mean_spatial(c5);
        let mean = g.reshape(mean, &[d, 1]);
        let flat = g.reshape(c5, &[d, hw]);
        let cols = g.concat_cols(&[mean, flat]);
        let tokens = g.transpose(cols);
        let pos = g.param(p.pos);
        let x = g.add(tokens, pos);
        let q = p.q.apply(g, x);
        let k = p.k.apply(g, x);
        let v = p.v.apply(g, x);
        let dh = d / p.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(p.heads);
        for i in 0..p.heads {
            let qh = g.slice_cols(q, i * dh, dh);
            let kh = g.slice_cols(k, i * dh, dh);
            let vh = g.slice_cols(v, i * dh, dh);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let logits = g.mul_const(logits, scale);
            let attn = g.softmax_rows(logits);
            heads.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&heads);
        let out = p.o.apply(g, merged);
        let out_t = g.transpose(out);
        let z_bar = g.slice_cols(out_t, 0, 1);
        let z_bar = g.reshape(z_bar, &[d]);
        let z = g.slice_cols(out_t, 1, hw);
        let z = g.reshape(z, &[d, h, w]);
        Ok(PooledVars { z_bar, z })
    }

    /// Three 3×3 convs, ReLU after the first two.
    pub fn adapt_grid_feature(&self, g: &mut Graph, z: Var) -> Var {
        let mut x = z;
        for (i, conv) in self.adapter.iter().enumerate() {
            x = conv.apply(g, x);
            if i < 2 {
                x = g.relu(x);
            }
        }
        x
    }

    /// FPN over `C3`, `C4` and `[z′, C5]`, returning P3..P7.
    pub fn fpn_fuse(&self, g: &mut Graph, c3: Var, c4: Var, c5: Var, z_prime: Var) -> Result<Vec<Var>> {
        let (zs, cs) = (g.shape(z_prime).to_vec(), g.shape(c5).to_vec());
        if zs[1..] != cs[1..] {
            return Err(Error::Shape(format!("z′ {zs:?} and C5 {cs:?} differ spatially")));
        }
        let top = g.concat(&[z_prime, c5]);
        let l5 = self.lateral[2].apply(g, top);
        let l4 = self.lateral[1].apply(g, c4);
        let l3 = self.lateral[0].apply(g, c3);
        let (_, h4, w4) = g.value(l4).chw();
        let up = g.upsample_nearest(l5, h4, w4);
        let m4 = g.add(l4, up);
        let (_, h3, w3) = g.value(l3).chw();
        let up = g.upsample_nearest(m4, h3, w3);
        let m3 = g.add(l3, up);
        let p3 = self.smooth[0].apply(g, m3);
        let p4 = self.smooth[1].apply(g, m4);
        let p5 = self.smooth[2].apply(g, l5);
        let p6 = self.p6.apply(g, l5);
        let r6 = g.relu(p6);
        let p7 = self.p7.apply(g, r6);
        Ok(vec![p3, p4, p5, p6, p7])
    }

    fn tower(&self, g: &mut Graph, blocks: &[TowerBlock], x: Var) -> Var {
        let mut x = x;
        for b in blocks {
            let y = b.conv.apply(g, x);
            let (gm, bt) = (g.param(b.gamma), g.param(b.beta));
            let y = g.group_norm(y, gm, bt, self.gn_groups, GN_EPS);
            x = g.relu(y);
        }
        x
    }

    /// `G_i`: one `embed_dim` vector per cell.
    pub fn cls_tower_forward(&self, g: &mut Graph, p: Var) -> Var {
        let t = self.tower(g, &self.cls_tower, p);
        self.cls_out.apply(g, t)
    }

    /// Positive `(l, t, r, b)` deltas in pixels and raw centerness logits.
    pub fn box_tower_forward(&self, g: &mut Graph, p: Var, level: usize) -> (Var, Var) {
        let t = self.tower(g, &self.box_tower, p);
        let raw = self.box_out.apply(g, t);
        let s = g.param(self.level_scales[level]);
        let scaled = g.scale_by(raw, s);
        let e = g.exp(scaled);
        let deltas = g.mul_const(e, STRIDES[level] as f64);
        let ctr = self.ctr_out.apply(g, t);
        (deltas, ctr)
    }

    /// `τ · cos(G_i(j), T_k)` for every cell and category.
    pub fn grid_cosine_scores(&self, g: &mut Graph, grid: Var, bank: BankRef) -> Result<Var> {
        if bank.k == 0 {
            return Err(Error::Input("empty embedding bank".into()));
        }
        let cos = g.cosine_scores(grid, bank.rows, bank.k, COSINE_EPS);
        Ok(match self.tau {
            Some(t) => {
                let t = g.param(t);
                g.scale_by(cos, t)
            }
            None => cos,
        })
    }

    /// Linear → ReLU → Linear → ReLU → Linear on `z̄`.
    pub fn image_align_head(&self, g: &mut Graph, z_bar: Var) -> Var {
        let n = g.shape(z_bar)[0];
        let mut x = g.reshape(z_bar, &[1, n]);
        for (i, l) in self.image_head.iter().enumerate() {
            x = l.apply(g, x);
            if i < 2 {
                x = g.relu(x);
            }
        }
        g.reshape(x, &[self.teacher_dim])
    }

    /// Full forward pass on a canvas-sized image. Scores are skipped when `bank` is `None`.
    pub fn forward(&self, g: &mut Graph, image: Var, bank: Option<BankRef>) -> Result<ForwardVars> {
        let backbone = self.backbone_forward(g, image)?;
        let pooled = self.attention_pool(g, backbone.c5)?;
        let z_prime = self.adapt_grid_feature(g, pooled.z);
        let pyramid = self.fpn_fuse(g, backbone.c3, backbone.c4, backbone.c5, z_prime)?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for (i, &p) in pyramid.iter().enumerate() {
            let grid = self.cls_tower_forward(g, p);
            let scores = match bank {
                Some(b) => Some(self.grid_cosine_scores(g, grid, b)?),
                None => None,
            };
            let (deltas, centerness) = self.box_tower_forward(g, p, i);
            levels.push(LevelVars {
                grid,
                scores,
                deltas,
                centerness,
            });
        }
        let z_bar_prime = self.image_align_head(g, pooled.z_bar);
        Ok(ForwardVars {
            backbone,
            pooled,
            z_prime,
            pyramid,
            levels,
            z_bar_prime,
        })
    }

    /// Current value of the cosine scale, 1 when fixed.
    pub fn tau_value(&self, store: &ParamStore) -> f64 {
        self.tau.map_or(1.0, |t| store.value(t).data[0])
    }
}

/// Per-channel spatial mean of a `C × H × W` tensor.
pub fn global_avg_pool(map: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = map.chw();
    if h * w == 0 || c == 0 {
        return Err(Error::Input("global_avg_pool on an empty map".into()));
    }
    Ok(map.data.chunks(h * w).map(|ch| ch.iter().sum::<f64>() / (h * w) as f64).collect())
}

/// Plain-value outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub grid_embeds: Vec<Tensor>,
    pub scores: Vec<Tensor>,
    pub box_deltas: Vec<Tensor>,
    pub centerness_logits: Vec<Tensor>,
    pub z_bar_prime: Vec<f64>,
    pub z_bar: Vec<f64>,
}

/// Inference without keeping the tape around.
pub fn predict(model: &GridClip, store: &ParamStore, image: &Tensor, bank: BankRef) -> Result<HeadOutputs> {
    let mut g = Graph::new(store);
    let x = g.input(image.clone());
    let f = model.forward(&mut g, x, Some(bank))?;
    let take = |v: Var| g.value(v).clone();
    Ok(HeadOutputs {
        grid_embeds: f.levels.iter().map(|l| take(l.grid)).collect(),
        scores: f.levels.iter().map(|l| take(l.scores.expect("bank given"))).collect(),
        box_deltas: f.levels.iter().map(|l| take(l.deltas)).collect(),
        centerness_logits: f.levels.iter().map(|l| take(l.centerness)).collect(),
        z_bar_prime: take(f.z_bar_prime).data,
        z_bar: take(f.pooled.z_bar).data,
    })
}
