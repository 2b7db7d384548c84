//! Loss terms as plain functions returning the value and its gradient with
//! respect to the network output they consume.

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Tensor,
}

impl LossOutput {
    fn scaled(mut self, s: f64) -> Self {
        self.value *= s;
        for g in &mut self.grad.data {
            *g *= s;
        }
        self
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` computed stably.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Focal term and its derivative w.r.t. the logit for one element.
pub fn focal_element(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let floor = LOG_FLOOR.ln();
    if positive {
        let raw = log_sigmoid(x);
        let (lp, dlp) = if raw < floor { (floor, 0.0) } else { (raw, 1.0 - p) };
        let q = 1.0 - p;
        let v = -alpha * q.powf(gamma) * lp;
        let dq = -p * (1.0 - p);
        let g = -alpha * (gamma_pow_deriv(q, gamma) * dq * lp + q.powf(gamma) * dlp);
        (v, g)
    } else {
        let raw = log_sigmoid(-x);
        let (lq, dlq) = if raw < floor { (floor, 0.0) } else { (raw, -p) };
        let v = -(1.0 - alpha) * p.powf(gamma) * lq;
        let dp = p * (1.0 - p);
        let g = -(1.0 - alpha) * (gamma_pow_deriv(p, gamma) * dp * lq + p.powf(gamma) * dlq);
        (v, g)
    }
}

/// d/du of `u^γ`, with the `γ = 0` case kept finite at `u = 0`.
fn gamma_pow_deriv(u: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        0.0
    } else {
        gamma * u.powf(gamma - 1.0)
    }
}

/// Un-normalised focal loss over a `K × H × W` logit map. `labels` holds the
/// positive category per cell.
pub fn focal_loss_sum(logits: &Tensor, labels: &[Option<usize>], alpha: f64, gamma: f64) -> LossOutput {
    let (k, h, w) = logits.chw();
    let hw = h * w;
    assert_eq!(labels.len(), hw, "one label slot per cell");
    let mut grad = Tensor::zeros(&logits.shape);
    let mut value = 0.0;
    for c in 0..k {
        for j in 0..hw {
            let i = c * hw + j;
            let (v, g) = focal_element(logits.data[i], labels[j] == Some(c), alpha, gamma);
            value += v;
            grad.data[i] = g;
        }
    }
    LossOutput { value, grad }
}

/// Focal loss normalised by `max(pos_count, 1)`.
pub fn focal_loss(logits: &Tensor, labels: &[Option<usize>], pos_count: usize, alpha: f64, gamma: f64) -> LossOutput {
    focal_loss_sum(logits, labels, alpha, gamma).scaled(1.0 / pos_count.max(1) as f64)
}

/// GIoU of two boxes sharing an anchor point, given as `(l, t, r, b)` distances,
/// plus the gradient w.r.t. the first box's distances.
pub fn giou_from_deltas(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = pred;
    let [lt, tt, rt, bt] = target;
    let wi = l.min(lt) + r.min(rt);
    let hi = t.min(tt) + b.min(bt);
    let inter = wi * hi;
    let ap = (l + r) * (t + b);
    let at = (lt + rt) * (tt + bt);
    let union = ap + at - inter;
    let wc = l.max(lt) + r.max(rt);
    let hc = t.max(tt) + b.max(bt);
    let c = wc * hc;
    let giou = inter / union - (c - union) / c;

    let ind = |a: f64, bb: f64| if a <= bb { 1.0 } else { 0.0 };
    let d_inter = [hi * ind(l, lt), wi * ind(t, tt), hi * ind(r, rt), wi * ind(b, bt)];
    let d_ap = [t + b, l + r, t + b, l + r];
    let d_c = [hc * (1.0 - ind(l, lt)), wc * (1.0 - ind(t, tt)), hc * (1.0 - ind(r, rt)), wc * (1.0 - ind(b, bt))];
    let k_inter = 1.0 / union + inter / (union * union) - 1.0 / c;
    let k_ap = -inter / (union * union) + 1.0 / c;
    let k_c = -union / (c * c);
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = d_inter[i] * k_inter + d_ap[i] * k_ap + d_c[i] * k_c;
    }
    (giou, grad)
}

/// Sum of `w · (1 − GIoU)` over positive cells of a `4 × H × W` delta map.
/// Unit weights unless `weights` is given. Returns the weight total alongside.
pub fn giou_loss_sum(deltas: &Tensor, reg: &[[f64; 4]], pos: &[bool], weights: Option<&[f64]>) -> (LossOutput, f64) {
    let (_, h, w) = deltas.chw();
    let hw = h * w;
    let mut grad = Tensor::zeros(&deltas.shape);
    let (mut value, mut total_w) = (0.0, 0.0);
    for j in (0..hw).filter(|&j| pos[j]) {
        let pred = [0, 1, 2, 3].map(|c| deltas.data[c * hw + j]);
        let (g, dg) = giou_from_deltas(pred, reg[j]);
        let wt = weights.map_or(1.0, |ws| ws[j]);
        value += wt * (1.0 - g);
        total_w += wt;
        for c in 0..4 {
            grad.data[c * hw + j] = -wt * dg[c];
        }
    }
    (LossOutput { value, grad }, total_w)
}

/// Mean `1 − GIoU` over positives; 0 without positives.
pub fn giou_loss(deltas: &Tensor, reg: &[[f64; 4]], pos: &[bool]) -> LossOutput {
    let (out, n) = giou_loss_sum(deltas, reg, pos, None);
    out.scaled(if n > 0.0 { 1.0 / n } else { 0.0 })
}

/// Sum of soft-target BCE over positive cells of a `1 × H × W` logit map.
pub fn centerness_loss_sum(logits: &Tensor, ctr: &[f64], pos: &[bool]) -> LossOutput {
    let mut grad = Tensor::zeros(&logits.shape);
    let mut value = 0.0;
    for (j, &x) in logits.data.iter().enumerate() {
        if !pos[j] {
            continue;
        }
        let c = ctr[j];
        value += -(c * log_sigmoid(x) + (1.0 - c) * log_sigmoid(-x));
        grad.data[j] = sigmoid(x) - c;
    }
    LossOutput { value, grad }
}

/// Mean BCE over positives; 0 without positives.
pub fn centerness_loss(logits: &Tensor, ctr: &[f64], pos: &[bool]) -> LossOutput {
    let n = pos.iter().filter(|&&p| p).count();
    centerness_loss_sum(logits, ctr, pos).scaled(if n > 0 { 1.0 / n as f64 } else { 0.0 })
}

/// `(1/D) Σ |a_d − b_d|` and its gradient w.r.t. `pred`. With `normalize`, both
/// vectors are scaled to unit norm first. The teacher side gets no gradient.
pub fn image_align_loss(pred: &[f64], teacher: &[f64], normalize: bool) -> Result<(f64, Vec<f64>)> {
    if pred.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "image embedding dim {} != teacher dim {}",
            pred.len(),
            teacher.len()
        )));
    }
    let d = pred.len() as f64;
    if !normalize {
        let value = pred.iter().zip(teacher).map(|(a, b)| (a - b).abs()).sum::<f64>() / d;
        let grad = pred.iter().zip(teacher).map(|(a, b)| sign(a - b) / d).collect();
        return Ok((value, grad));
    }
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        (v.iter().map(|x| x / n).collect::<Vec<_>>(), n)
    };
    let (pa, na) = unit(pred);
    let (tb, _) = unit(teacher);
    let value = pa.iter().zip(&tb).map(|(a, b)| (a - b).abs()).sum::<f64>() / d;
    let s: Vec<f64> = pa.iter().zip(&tb).map(|(a, b)| sign(a - b) / d).collect();
    // Jacobian of x / |x| is (I − x̂ x̂ᵀ) / |x|.
    let proj: f64 = s.iter().zip(&pa).map(|(a, b)| a * b).sum();
    let grad = s.iter().zip(&pa).map(|(si, ai)| (si - ai * proj) / na).collect();
    Ok((value, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The four logged loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub l_grid: f64,
    pub l_image: f64,
    pub l_reg: f64,
    pub l_ctr: f64,
}

/// `w_grid · L_grid + w_image · L_image + L_R + L_C`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_grid", c.l_grid), ("l_image", c.l_image), ("l_reg", c.l_reg), ("l_ctr", c.l_ctr)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component: name, value: v });
        }
    }
    Ok(w.w_grid * c.l_grid + w.w_image * c.l_image + c.l_reg + c.l_ctr)
}
