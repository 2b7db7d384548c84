//! Reverse-mode automatic differentiation over single-image tensors.
//!
//! A [`Graph`] records every op of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a parameter or a grad-requiring input.
//! Maps are `C × H × W`; there is no batch dimension, batching happens by
//! accumulating per-image gradients in a fixed order.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    MulConst(Var, f64),
    Exp(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Upsample(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanSpatial(Var),
    Cosine {
        g: Var,
        bank: Vec<f64>,
        k: usize,
        norms: Vec<f64>,
        floored: Vec<bool>,
    },
    /// Scalar produced by an external function whose input-gradient is known.
    External {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted (used for input-sensitivity checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.value(id).clone();
        self.push(t, Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be O×C×k×k");
        let (o, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(kc, c, "conv expects {kc} input channels, got {c}");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv input smaller than kernel");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let cols = im2col(&self.value(x).data, c, h, wd, kh, kw, stride, pad, ho, wo);
        let mut out = vec![0.0; o * ho * wo];
        if let Some(b) = b {
            let bias = &self.value(b).data;
            for (oc, row) in out.chunks_mut(ho * wo).enumerate() {
                row.fill(bias[oc]);
            }
        }
        gemm(
            o,
            c * kh * kw,
            ho * wo,
            &self.value(w).data,
            false,
            &cols,
            false,
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| a.max(0.0)).collect());
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let out = Tensor::new(
            va.shape.clone(),
            va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let out = Tensor::new(
            va.shape.clone(),
            va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `x * s` where `s` holds a single element.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let s_val = self.value(s).item();
        let vx = self.value(x);
        let out = Tensor::new(vx.shape.clone(), vx.data.iter().map(|v| v * s_val).collect());
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ScaleBy(x, s), ng)
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape.clone(), vx.data.iter().map(|v| v * c).collect());
        let ng = self.ng(x);
        self.push(out, Op::MulConst(x, c), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape.clone(), vx.data.iter().map(|v| v.exp()).collect());
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(groups > 0 && c % groups == 0, "{groups} groups do not divide {c} channels");
        let per = c / groups * h * w;
        let xs = &self.value(x).data;
        let (gm, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; xs.len()];
        for gi in 0..groups {
            let seg = &xs[gi * per..(gi + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for i in 0..per {
                let idx = gi * per + i;
                let ch = idx / (h * w);
                xhat[idx] = (xs[idx] - mean) * is;
                out[idx] = xhat[idx] * gm[ch] + bt[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(vec![c, h, w], out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Concatenation along the leading axis (channels for maps, rows for matrices).
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape[1..], &tail[..], "concat trailing shape mismatch");
            lead += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()), ng)
    }

    /// Nearest-neighbour resize of a `C × h × w` map to `C × out_h × out_w`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let xs = &self.value(x).data;
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for y in 0..out_h {
                let sy = y * h / out_h;
                for xx in 0..out_w {
                    let sx = xx * w / out_w;
                    out[(ch * out_h + y) * out_w + xx] = xs[(ch * h + sy) * w + sx];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c, out_h, out_w], out), Op::Upsample(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape.len(), 2);
        let (r, c) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data[i * c + j];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c, r], out), Op::Transpose(x), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let mut out = vec![0.0; sa[0] * sb[1]];
        gemm(sa[0], sa[1], sb[1], &self.value(a).data, false, &self.value(b).data, false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![sa[0], sb[1]], out), Op::MatMul(a, b), ng)
    }

    /// `x · wᵀ + b` for `x: N × in`, `w: out × in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 2 && sw.len() == 2 && sx[1] == sw[1], "linear {sx:?} with {sw:?}");
        let (n, out_dim) = (sx[0], sw[0]);
        let mut out = vec![0.0; n * out_dim];
        if let Some(b) = b {
            let bias = &self.value(b).data;
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            n,
            sx[1],
            out_dim,
            &self.value(x).data,
            false,
            &self.value(w).data,
            true,
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![n, out_dim], out), Op::Linear { x, w, b }, ng)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape.len(), 2);
        let cols = v.shape[1];
        let mut out = v.data.clone();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        let shape = v.shape.clone();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::Softmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let (r, c) = (v.shape[0], v.shape[1]);
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v.data[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![r, len], out), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0])[0];
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape[0], rows);
            let c = v.shape[1];
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(&v.data[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Per-channel spatial mean: `C × H × W → C`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        assert!(hw > 0, "empty map");
        let out: Vec<f64> = self
            .value(x)
            .data
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c], out), Op::MeanSpatial(x), ng)
    }

    /// Cosine similarity of every cell of `g: E × H × W` against the rows of
    /// `bank: K × E`, giving `K × H × W`. Cell and bank-row norms are floored at `eps`.
    pub fn cosine_scores(&mut self, g: Var, bank: &[f64], k: usize, eps: f64) -> Var {
        let (e, h, w) = self.value(g).chw();
        assert_eq!(bank.len(), k * e, "bank is {k}×? but grid embedding has {e} channels");
        let hw = h * w;
        let gs = &self.value(g).data;
        let mut norms = vec![0.0; hw];
        let mut floored = vec![false; hw];
        for j in 0..hw {
            let n = (0..e).map(|d| gs[d * hw + j] * gs[d * hw + j]).sum::<f64>().sqrt();
            floored[j] = n < eps;
            norms[j] = n.max(eps);
        }
        let mut bank = bank.to_vec();
        for row in bank.chunks_mut(e) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let mut out = vec![0.0; k * hw];
        gemm(k, e, hw, &bank, false, gs, false, &mut out, 0.0);
        for kk in 0..k {
            for j in 0..hw {
                out[kk * hw + j] /= norms[j];
            }
        }
        let ng = self.ng(g);
        self.push(
            Tensor::new(vec![k, h, w], out),
            Op::Cosine {
                g,
                bank,
                k,
                norms,
                floored,
            },
            ng,
        )
    }

    /// Registers a scalar computed outside the graph from `x`, with its known gradient.
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape, self.value(x).shape, "external gradient shape mismatch");
        let ng = self.ng(x);
        self.push(Tensor::scalar(value), Op::External { x, grad }, ng)
    }

    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Runs reverse-mode accumulation from the scalar `root` (seeded with 1).
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape.clone(), vec![1.0]));
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(gout);
                continue;
            }
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let go = &gout.data;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (c, h, wd) = self.value(*x).chw();
                let ws = self.shape(*w);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let (_, ho, wo) = node.value.chw();
                let ckk = c * kh * kw;
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, ho * wo, ckk, go, false, cols, true, &mut dw, 0.0);
                    self.accum(grads, *w, Tensor::new(ws.to_vec(), dw));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let db = go.chunks(ho * wo).map(|r| r.iter().sum()).collect();
                        self.accum(grads, *b, Tensor::new(vec![o], db));
                    }
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; ckk * ho * wo];
                    gemm(ckk, o, ho * wo, &self.value(*w).data, true, go, false, &mut dcols, 0.0);
                    let dx = col2im(&dcols, c, h, wd, kh, kw, *stride, *pad, ho, wo);
                    self.accum(grads, *x, Tensor::new(vec![c, h, wd], dx));
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let d = go.iter().zip(xv).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.accum(grads, *x, Tensor::new(gout.shape.clone(), d));
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                if self.ng(*a) {
                    let d = go.iter().zip(vb).map(|(g, y)| g * y).collect();
                    self.accum(grads, *a, Tensor::new(gout.shape.clone(), d));
                }
                if self.ng(*b) {
                    let d = go.iter().zip(va).map(|(g, x)| g * x).collect();
                    self.accum(grads, *b, Tensor::new(gout.shape.clone(), d));
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                if self.ng(*x) {
                    let d = go.iter().map(|g| g * sv).collect();
                    self.accum(grads, *x, Tensor::new(gout.shape.clone(), d));
                }
                if self.ng(*s) {
                    let ds: f64 = go.iter().zip(&self.value(*x).data).map(|(g, v)| g * v).sum();
                    let shape = self.shape(*s).to_vec();
                    self.accum(grads, *s, Tensor::new(shape, vec![ds]));
                }
            }
            Op::MulConst(x, c) => {
                let d = go.iter().map(|g| g * c).collect();
                self.accum(grads, *x, Tensor::new(gout.shape.clone(), d));
            }
            Op::Exp(x) => {
                let d = go.iter().zip(&node.value.data).map(|(g, y)| g * y).collect();
                self.accum(grads, *x, Tensor::new(gout.shape.clone(), d));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = self.value(*x).chw();
                let hw = h * w;
                let gm = &self.value(*gamma).data;
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        for i in ch * hw..(ch + 1) * hw {
                            dg[ch] += go[i] * xhat[i];
                            db[ch] += go[i];
                        }
                    }
                    self.accum(grads, *gamma, Tensor::new(vec![c], dg));
                    self.accum(grads, *beta, Tensor::new(vec![c], db));
                }
                if self.ng(*x) {
                    let per = c / groups * hw;
                    let mut dx = vec![0.0; c * hw];
                    for gi in 0..*groups {
                        let range = gi * per..(gi + 1) * per;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in range.clone() {
                            let dxh = go[i] * gm[i / hw];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[i];
                        }
                        mean_d /= per as f64;
                        mean_dx /= per as f64;
                        for i in range {
                            let dxh = go[i] * gm[i / hw];
                            dx[i] = inv_std[gi] * (dxh - mean_d - xhat[i] * mean_dx);
                        }
                    }
                    self.accum(grads, *x, Tensor::new(vec![c, h, w], dx));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let v = self.value(p);
                    let n = v.len();
                    self.accum(grads, p, Tensor::new(v.shape.clone(), go[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Upsample(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = node.value.chw();
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        let sy = y * h / oh;
                        for xx in 0..ow {
                            let sx = xx * w / ow;
                            dx[(ch * h + sy) * w + sx] += go[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![c, h, w], dx));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accum(grads, *x, Tensor::new(shape, go.clone()));
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape[0], node.value.shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = go[i * c + j];
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![c, r], d));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, go, false, &self.value(*b).data, true, &mut da, 0.0);
                    self.accum(grads, *a, Tensor::new(sa, da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &self.value(*a).data, true, go, false, &mut db, 0.0);
                    self.accum(grads, *b, Tensor::new(sb, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (n, din, dout) = (sx[0], sx[1], sw[0]);
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, go, false, &self.value(*w).data, false, &mut dx, 0.0);
                    self.accum(grads, *x, Tensor::new(sx, dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, go, true, &self.value(*x).data, false, &mut dw, 0.0);
                    self.accum(grads, *w, Tensor::new(sw, dw));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![0.0; dout];
                        for row in go.chunks(dout) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accum(grads, *b, Tensor::new(vec![dout], db));
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.shape[1];
                let mut d = vec![0.0; go.len()];
                for ((drow, grow), yrow) in d
                    .chunks_mut(cols)
                    .zip(go.chunks(cols))
                    .zip(node.value.data.chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((dd, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dd = y * (g - dot);
                    }
                }
                self.accum(grads, *x, Tensor::new(gout.shape.clone(), d));
            }
            Op::SliceCols { x, start } => {
                let sx = self.shape(*x).to_vec();
                let (r, c) = (sx[0], sx[1]);
                let len = node.value.shape[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&go[i * len..(i + 1) * len]);
                }
                self.accum(grads, *x, Tensor::new(sx, d));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.value.shape[0], node.value.shape[1]);
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut d = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        d.extend_from_slice(&go[i * total + off..i * total + off + c]);
                    }
                    self.accum(grads, p, Tensor::new(vec![rows, c], d));
                    off += c;
                }
            }
            Op::MeanSpatial(x) => {
                let (c, h, w) = self.value(*x).chw();
                let hw = (h * w) as f64;
                let mut d = vec![0.0; c * h * w];
                for (ch, row) in d.chunks_mut(h * w).enumerate() {
                    row.fill(go[ch] / hw);
                }
                self.accum(grads, *x, Tensor::new(vec![c, h, w], d));
            }
            Op::Cosine {
                g,
                bank,
                k,
                norms,
                floored,
            } => {
                let (e, h, w) = self.value(*g).chw();
                let hw = h * w;
                let gs = &self.value(*g).data;
                let s = &node.value.data;
                // d s_kj / d g_j = (T_k - s_kj * g_j / n_j) / n_j (unfloored cells)
                let mut tdg = vec![0.0; e * hw];
                gemm(e, *k, hw, bank, true, go, false, &mut tdg, 0.0);
                let mut d = vec![0.0; e * hw];
                for j in 0..hw {
                    let n = norms[j];
                    if floored[j] {
                        for dd in 0..e {
                            d[dd * hw + j] = tdg[dd * hw + j] / n;
                        }
                        continue;
                    }
                    let gs_dot: f64 = (0..*k).map(|kk| go[kk * hw + j] * s[kk * hw + j]).sum();
                    for dd in 0..e {
                        let gj = gs[dd * hw + j];
                        d[dd * hw + j] = (tdg[dd * hw + j] - gs_dot * gj / n) / n;
                    }
                }
                self.accum(grads, *g, Tensor::new(vec![e, h, w], d));
            }
            Op::External { x, grad } => {
                let gs = go[0];
                let d = grad.data.iter().map(|v| v * gs).collect();
                self.accum(grads, *x, Tensor::new(grad.shape.clone(), d));
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter-node gradient into `out`, in tape order.
    pub fn accumulate_params(&self, graph: &Graph<'_>, out: &mut ParamGrads) {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                out.grads[id.0].add_assign(g);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * kh * kw * ho * wo];
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ch * h + iy as usize) * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ch * h + iy as usize) * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{normal, ParamGroup};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(f(x) * probe))/dx for one op.
    fn check_op(shape: &[usize], build: impl Fn(&mut Graph<'_>, Var) -> Var) {
        check_op_with(&ParamStore::new(), shape, build)
    }

    fn check_op_with(store: &ParamStore, shape: &[usize], build: impl Fn(&mut Graph<'_>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = normal(&mut rng, shape, 1.0);
        let eval = |x: &Tensor| -> (f64, Option<Tensor>) {
            let mut g = Graph::new(store);
            let xv = g.input_with_grad(x.clone());
            let y = build(&mut g, xv);
            let n = g.value(y).len();
            let w = Tensor::new(
                g.shape(y).to_vec(),
                (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect(),
            );
            let wv = g.input(w);
            let prod = g.mul(y, wv);
            let ones = Tensor::full(&[n], 1.0);
            let total: f64 = g.value(prod).data.iter().sum();
            let s = g.reshape(prod, &[n]);
            let root = g.external_scalar(s, total, ones);
            let grads = g.backward(root);
            (total, grads.get(xv).cloned())
        };
        let (_, analytic) = eval(&x0);
        let analytic = analytic.expect("input gradient");
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data[i] += h;
            let mut xm = x0.clone();
            xm.data[i] -= h;
            let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let err = (num - analytic.data[i]).abs() / num.abs().max(1e-6);
            assert!(err < 1e-5, "coord {i}: numeric {num} analytic {}", analytic.data[i]);
        }
    }

    #[test]
    fn conv_stride_two_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = store.add("w", ParamGroup::Head, normal(&mut rng, &[3, 2, 3, 3], 0.5));
        let b = store.add("b", ParamGroup::Head, normal(&mut rng, &[3], 0.5));
        check_op_with(&store, &[2, 5, 6], |g, x| {
            let wv = g.param(w);
            let bv = g.param(b);
            g.conv2d(x, wv, Some(bv), 2, 1)
        });
    }

    #[test]
    fn group_norm_gradient() {
        check_op(&[4, 3, 2], |g, x| {
            let gamma = g.input(Tensor::new(vec![4], vec![1.0, 0.5, -0.7, 2.0]));
            let beta = g.input(Tensor::new(vec![4], vec![0.1, 0.0, 0.3, -0.2]));
            g.group_norm(x, gamma, beta, 2, 1e-5)
        });
    }

    #[test]
    fn attention_like_chain_gradient() {
        check_op(&[3, 4], |g, x| {
            let t = g.transpose(x);
            let s = g.matmul(x, t);
            let p = g.softmax_rows(s);
            let a = g.slice_cols(x, 1, 2);
            let b = g.slice_cols(x, 0, 1);
            let cat = g.concat_cols(&[a, b]);
            let y = g.matmul(p, cat);
            g.exp(y)
        });
    }

    #[test]
    fn upsample_concat_mean_gradient() {
        check_op(&[2, 2, 3], |g, x| {
            let u = g.upsample_nearest(x, 4, 6);
            let r = g.relu(u);
            let c = g.concat(&[r, u]);
            let m = g.mean_spatial(c);
            g.reshape(m, &[2, 2])
        });
    }

    #[test]
    fn cosine_gradient() {
        let bank = vec![0.6, 0.8, 0.0, 0.0, 0.0, 1.0, 0.5773, -0.5773, 0.5773];
        check_op(&[3, 2, 2], |g, x| g.cosine_scores(x, &bank, 3, 1e-8));
        // unnormalised rows
        let bank = vec![3.0, -1.0, 2.0, 0.01, 0.02, 0.0, -7.0, 0.5, 4.0];
        check_op(&[3, 2, 2], |g, x| g.cosine_scores(x, &bank, 3, 1e-8));
    }

    #[test]
    fn cosine_ignores_bank_row_scale() {
        let store = ParamStore::new();
        let x = normal(&mut ChaCha8Rng::seed_from_u64(3), &[3, 2, 2], 1.0);
        let unit = vec![0.6, 0.8, 0.0, 0.0, 0.0, 1.0];
        let big: Vec<f64> = unit.iter().zip([5.0, 5.0, 5.0, 0.1, 0.1, 0.1]).map(|(a, b)| a * b).collect();
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let a = g.cosine_scores(xv, &unit, 2, 1e-8);
        let b = g.cosine_scores(xv, &big, 2, 1e-8);
        for (p, q) in g.value(a).data.iter().zip(&g.value(b).data) {
            assert!((p - q).abs() < 1e-12 && q.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn linear_and_scale_gradient() {
        check_op(&[2, 3], |g, x| {
            let w = g.input(Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
            let y = g.linear(x, w, None);
            let s = g.slice_cols(x, 0, 1);
            let s = g.reshape(s, &[2]);
            let r = g_reshape3(g, s);
            let s0 = g.mean_spatial(r);
            let y = g.scale_by(y, s0);
            g.mul_const(y, 3.0)
        });
    }

    fn g_reshape3(g: &mut Graph<'_>, v: Var) -> Var {
        let n = g.value(v).len();
        g.reshape(v, &[1, n, 1])
    }

    #[test]
    fn params_receive_accumulated_gradients() {
        let mut store = ParamStore::new();
        let p = store.add("p", ParamGroup::Head, Tensor::new(vec![2], vec![1.0, 2.0]));
        let mut g = Graph::new(&store);
        let a = g.param(p);
        let b = g.param(p);
        let s = g.mul(a, b);
        let root = g.external_scalar(s, 5.0, Tensor::new(vec![2], vec![1.0, 1.0]));
        let grads = g.backward(root);
        let mut out = ParamGrads::zeros_like(&store);
        grads.accumulate_params(&g, &mut out);
        // d/dp sum(p*p) = 2p
        assert_eq!(out.get(p).data, vec![2.0, 4.0]);
    }
}
