//! The training loop: augment, assign targets, query the teacher, forward,
//! combine the four losses, backpropagate, clip, and step AdamW.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{apply_augmentation, compute_repeat_factors, sample_epoch_indices, to_canvas, AnnotatedImage, AugmentPolicy, Dataset, DataSplit};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{centerness_loss_sum, focal_loss_sum, giou_loss_sum, image_align_loss, total_loss, LossComponents};
use crate::model::{BankRef, GridClip};
use crate::optim::{build_lr_schedule, clip_param_grads, AdamW};
use crate::params::{ParamGrads, ParamStore};
use crate::targets::{assign_targets, GridTargets, PyramidGeometry};
use crate::teacher::{Teacher, TeacherInput};
use crate::text_bank::EmbeddingBank;

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub l_grid: f64,
    pub l_image: f64,
    pub l_reg: f64,
    pub l_ctr: f64,
    pub total: f64,
    pub lr: f64,
}

impl TraceRow {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            l_grid: self.l_grid,
            l_image: self.l_image,
            l_reg: self.l_reg,
            l_ctr: self.l_ctr,
        }
    }
}

pub fn write_trace_csv<W: Write>(w: W, rows: &[TraceRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(["iter", "l_grid", "l_image", "l_reg", "l_ctr", "total", "lr"])?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// A canvas-ready training sample.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: usize,
    pub canvas: crate::tensor::Tensor,
    pub targets: GridTargets,
    pub teacher: Vec<f64>,
}

/// Targets only for labels present in the bank; the teacher sees every object.
pub fn prepare_image(
    img: &AnnotatedImage,
    config: &ExperimentConfig,
    bank: &EmbeddingBank,
    teacher: &Teacher,
) -> Result<PreparedImage> {
    let (h, w) = config.image_size;
    let canvas = to_canvas(&img.image, h, w)?;
    let kept = img.filter_labels(|l| bank.index_of(l).is_some());
    let targets = assign_targets(
        &kept.boxes,
        &kept.labels,
        bank.names(),
        &PyramidGeometry::for_canvas(h, w),
        &config.scale_ranges,
    )?;
    let teacher = teacher.embed(&TeacherInput {
        id: img.id,
        image: &img.image,
        boxes: &img.boxes,
        labels: &img.labels,
    })?;
    Ok(PreparedImage {
        id: img.id,
        canvas,
        targets,
        teacher,
    })
}

/// Batch-level divisors shared by every image of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizers {
    /// `max(N_pos, 1)` over the batch.
    pub pos: f64,
    /// Divisor for the regression sum: positives, or summed centerness when weighted.
    pub reg: f64,
    pub batch: f64,
}

impl Normalizers {
    pub fn for_batch(batch: &[PreparedImage], centerness_weighted: bool) -> Self {
        let pos = batch.iter().map(|p| p.targets.num_pos()).sum::<usize>().max(1) as f64;
        let reg = if centerness_weighted {
            let s: f64 = batch
                .iter()
                .flat_map(|p| p.targets.levels.iter())
                .flat_map(|l| l.labels.iter().zip(&l.ctr).filter(|(lab, _)| lab.is_some()).map(|(_, c)| *c))
                .sum();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        } else {
            pos
        };
        Self {
            pos,
            reg,
            batch: batch.len().max(1) as f64,
        }
    }
}

/// This image's share of each batch loss term, and optionally its parameter gradients.
pub fn image_loss(
    model: &GridClip,
    store: &ParamStore,
    sample: &PreparedImage,
    bank: BankRef,
    config: &ExperimentConfig,
    norms: Normalizers,
    want_grads: bool,
) -> Result<(LossComponents, Option<ParamGrads>)> {
    let mut g = Graph::new(store);
    let x = g.input(sample.canvas.clone());
    let f = model.forward(&mut g, x, Some(bank))?;
    let w = &config.loss_weights;
    let mut parts = Vec::with_capacity(3 * f.levels.len() + 1);
    let mut c = LossComponents::default();
    for (lv, t) in f.levels.iter().zip(&sample.targets.levels) {
        let scores = lv.scores.expect("bank given");
        let mut fl = focal_loss_sum(g.value(scores), &t.labels, config.focal_alpha, config.focal_gamma);
        fl.value /= norms.pos;
        c.l_grid += fl.value;
        let scale = w.w_grid / norms.pos;
        fl.grad.data.iter_mut().for_each(|v| *v *= scale);
        parts.push(g.external_scalar(scores, w.w_grid * fl.value, fl.grad));

        let pos = t.pos_mask();
        if t.num_pos() > 0 {
            let weights = config.centerness_weighted_regression.then_some(t.ctr.as_slice());
            let (mut rl, _) = giou_loss_sum(g.value(lv.deltas), &t.reg, &pos, weights);
            rl.value /= norms.reg;
            c.l_reg += rl.value;
            rl.grad.data.iter_mut().for_each(|v| *v /= norms.reg);
            parts.push(g.external_scalar(lv.deltas, rl.value, rl.grad));

            let mut cl = centerness_loss_sum(g.value(lv.centerness), &t.ctr, &pos);
            cl.value /= norms.pos;
            c.l_ctr += cl.value;
            cl.grad.data.iter_mut().for_each(|v| *v /= norms.pos);
            parts.push(g.external_scalar(lv.centerness, cl.value, cl.grad));
        }
    }
    let (li, gi) = image_align_loss(&g.value(f.z_bar_prime).data, &sample.teacher, config.normalize_alignment)?;
    c.l_image = li / norms.batch;
    let scale = w.w_image / norms.batch;
    let grad = crate::tensor::Tensor::new(vec![gi.len()], gi.into_iter().map(|v| v * scale).collect());
    parts.push(g.external_scalar(f.z_bar_prime, w.w_image * c.l_image, grad));

    if !want_grads {
        return Ok((c, None));
    }
    let root = g.add_all(&parts);
    let grads = g.backward(root);
    let mut pg = ParamGrads::zeros_like(store);
    grads.accumulate_params(&g, &mut pg);
    Ok((c, Some(pg)))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GridClip,
    pub store: ParamStore,
    pub trace: Vec<TraceRow>,
    pub teacher_hash_start: String,
    pub teacher_hash_end: String,
}

/// Number of optimizer steps in one nominal epoch.
pub fn iters_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size.max(1)).max(1)
}

/// Trains on the dataset's train split against `bank`. Labels outside the bank
/// are treated as background.
pub fn run_training(
    config: &ExperimentConfig,
    dataset: &Dataset,
    bank: &EmbeddingBank,
    teacher: &Teacher,
) -> Result<TrainOutcome> {
    config.validate()?;
    if bank.dim() != config.embed_dim {
        return Err(Error::Config(format!("bank dim {} != embed_dim {}", bank.dim(), config.embed_dim)));
    }
    if teacher.dim() != config.teacher_dim {
        return Err(Error::Config(format!("teacher dim {} != teacher_dim {}", teacher.dim(), config.teacher_dim)));
    }
    let (model, mut store) = GridClip::init(config)?;
    let teacher_hash_start = teacher.content_hash();
    let train: Vec<&AnnotatedImage> = dataset.split(DataSplit::Train);
    if config.epochs == 0 || train.is_empty() {
        return Ok(TrainOutcome {
            model,
            store,
            trace: Vec::new(),
            teacher_hash_end: teacher.content_hash(),
            teacher_hash_start,
        });
    }
    let per_epoch = iters_per_epoch(train.len(), config.batch_size);
    let total_iters = per_epoch * config.epochs;
    let schedule = build_lr_schedule(config, total_iters)?;
    let mut opt = AdamW::new(&store, config.weight_decay);
    let policy = AugmentPolicy::from_config(config);
    let bank_rows = bank.matrix_f64();
    let bank_ref = BankRef {
        rows: &bank_rows,
        k: bank.len(),
    };

    let filtered: Vec<AnnotatedImage> = train.iter().map(|i| i.filter_labels(|l| bank.index_of(l).is_some())).collect();
    let refs: Vec<&AnnotatedImage> = filtered.iter().collect();
    let factors = compute_repeat_factors(&dataset.manifest, &refs, config.repeat_threshold)?;
    let pos_of: HashMap<usize, usize> = train.iter().enumerate().map(|(p, i)| (i.id, p)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let mut trace = Vec::with_capacity(total_iters);
    for epoch in 0..config.epochs {
        let mut order = sample_epoch_indices(&factors.per_image, &mut rng);
        order.shuffle(&mut rng);
        let need = per_epoch * config.batch_size;
        let order: Vec<usize> = order.iter().cycle().take(need).copied().collect();
        for step in 0..per_epoch {
            let iter = epoch * per_epoch + step;
            let ids = &order[(step * config.batch_size).min(order.len())..((step + 1) * config.batch_size).min(order.len())];
            let mut batch = Vec::with_capacity(ids.len());
            for id in ids {
                let img = train[pos_of[id]];
                let aug = apply_augmentation(img, &mut rng, &policy)?;
                batch.push(prepare_image(&aug, config, bank, teacher)?);
            }
            let norms = Normalizers::for_batch(&batch, config.centerness_weighted_regression);
            let mut grads = ParamGrads::zeros_like(&store);
            let mut comps = LossComponents::default();
            for sample in &batch {
                let (c, g) = image_loss(&model, &store, sample, bank_ref, config, norms, true)?;
                comps.l_grid += c.l_grid;
                comps.l_image += c.l_image;
                comps.l_reg += c.l_reg;
                comps.l_ctr += c.l_ctr;
                let g = g.expect("requested");
                for (acc, gi) in grads.grads.iter_mut().zip(&g.grads) {
                    acc.add_assign(gi);
                }
            }
            let total = total_loss(&comps, &config.loss_weights)?;
            clip_param_grads(&mut grads, config.grad_clip_norm);
            let lr = config.base_lr * schedule.multiplier(iter);
            opt.step(&mut store, &grads, |group| config.base_lr * schedule.group_multiplier(iter, group));
            trace.push(TraceRow {
                iter,
                l_grid: comps.l_grid,
                l_image: comps.l_image,
                l_reg: comps.l_reg,
                l_ctr: comps.l_ctr,
                total,
                lr,
            });
            if iter.is_multiple_of(20) || iter + 1 == total_iters {
                log::info!(
                    "iter {iter}/{total_iters} total {total:.4} grid {:.4} image {:.4} reg {:.4} ctr {:.4} lr {lr:.2e}",
                    comps.l_grid,
                    comps.l_image,
                    comps.l_reg,
                    comps.l_ctr
                );
            }
        }
    }
    Ok(TrainOutcome {
        model,
        store,
        trace,
        teacher_hash_end: teacher.content_hash(),
        teacher_hash_start,
    })
}
