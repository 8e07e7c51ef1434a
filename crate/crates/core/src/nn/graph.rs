//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append nodes
//! holding their output value; [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients into every node that feeds the loss.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamSet};
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// `[n, c] + [n, 1]` broadcast along columns.
    AddCol(Var, Var),
    /// `[n, c] * [n, 1]` broadcast along columns.
    MulCol(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Im2col {
        x: Var,
        geom: ConvGeom,
    },
    Upsample2 {
        x: Var,
        h: usize,
        w: usize,
    },
    AvgPool {
        x: Var,
        h: usize,
        w: usize,
        f: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Arc<[usize]>,
        probs: Vec<S>,
    },
    Dice {
        probs: Var,
        targets: Arc<[usize]>,
        classes: Arc<[bool]>,
        smooth: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Computation tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, Var>,
    attention: Vec<Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by tape position.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            attention: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Marks `v` as an attention-weight matrix for later inspection.
    pub fn record_attention(&mut self, v: Var) {
        self.attention.push(v);
    }

    /// Every attention-weight matrix recorded on this tape, in creation order.
    pub fn attention_maps(&self) -> impl Iterator<Item = &Tensor<S>> + '_ {
        self.attention.iter().map(|&v| self.value(v))
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(params.tensor(id).clone(), Op::Leaf);
        self.bound.insert(id, v);
        v
    }

    /// Parameters bound into this graph, with their tape handles.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "add: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Mul(a, b))
    }

    /// `x[n, c] + row[c]` for every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        let c = vx.cols();
        assert_eq!(vr.len(), c, "add_row: width mismatch");
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, &r) in chunk.iter_mut().zip(vr.data()) {
                *d += r;
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::AddRow(x, row))
    }

    /// `x[n, c] * row[c]` for every row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        let c = vx.cols();
        assert_eq!(vr.len(), c, "mul_row: width mismatch");
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, &r) in chunk.iter_mut().zip(vr.data()) {
                *d *= r;
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::MulRow(x, row))
    }

    /// `x[n, c] + col[n, 1]`.
    pub fn add_col(&mut self, x: Var, col: Var) -> Var {
        let (vx, vc) = (self.value(x), self.value(col));
        let (n, c) = (vx.rows(), vx.cols());
        assert_eq!(vc.len(), n, "add_col: height mismatch");
        let mut data = vx.data().to_vec();
        for (i, chunk) in data.chunks_mut(c).enumerate() {
            let s = vc.data()[i];
            for d in chunk.iter_mut() {
                *d += s;
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::AddCol(x, col))
    }

    /// `x[n, c] * col[n, 1]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (vx, vc) = (self.value(x), self.value(col));
        let (n, c) = (vx.rows(), vx.cols());
        assert_eq!(vc.len(), n, "mul_col: height mismatch");
        let mut data = vx.data().to_vec();
        for (i, chunk) in data.chunks_mut(c).enumerate() {
            let s = vc.data()[i];
            for d in chunk.iter_mut() {
                *d *= s;
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::MulCol(x, col))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = vx.data()[i * c + j];
            }
        }
        self.push(Tensor::from_vec(&[c, r], out), Op::Transpose(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(out, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_fwd);
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise softmax. `mask[i]` false excludes element `i` (probability exactly 0).
    /// Every row must keep at least one element.
    pub fn softmax(&mut self, x: Var, mask: Option<Arc<[bool]>>) -> Var {
        let vx = self.value(x);
        if let Some(m) = &mask {
            assert_eq!(m.len(), vx.len(), "softmax: mask size");
        }
        let c = vx.cols();
        let mut out = vec![S::zero(); vx.len()];
        for (r, (src, dst)) in vx.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
            softmax_row(src, dst, allowed);
        }
        let out = Tensor::from_vec(vx.shape(), out);
        self.push(out, Op::Softmax { x })
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let cn = S::from_usize(c).unwrap();
        let mut xhat = vec![S::zero(); vx.len()];
        let mut inv_std = Vec::with_capacity(vx.rows());
        for (src, dst) in vx.data().chunks(c).zip(xhat.chunks_mut(c)) {
            let mean = src.iter().copied().sum::<S>() / cn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cn;
            let is = S::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::from_vec(vx.shape(), xhat.clone());
        self.push(out, Op::LayerNorm { x, xhat, inv_std })
    }

    /// Patch extraction for a `k x k` convolution over a token-major `[h*w, c]` map.
    /// Output is `[ho*wo, k*k*c]` with column `(ky*k + kx)*c + ch`; padding reads zero.
    pub(crate) fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        let ConvGeom { h, w, c, k, stride, pad, ho, wo } = geom;
        assert_eq!(vx.len(), h * w * c, "im2col: input size");
        let kc = k * k * c;
        let mut out = vec![S::zero(); ho * wo * kc];
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = &mut out[(oy * wo + ox) * kc..(oy * wo + ox + 1) * kc];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let dst = (ky * k + kx) * c;
                        orow[dst..dst + c].copy_from_slice(&vx.data()[src..src + c]);
                    }
                }
            }
        }
        self.push(Tensor::from_vec(&[ho * wo, kc], out), Op::Im2col { x, geom })
    }

    /// Nearest-neighbour 2x upsampling of a `[h*w, c]` map.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        assert_eq!(vx.rows(), h * w, "upsample2: grid size");
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![S::zero(); h2 * w2 * c];
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((y / 2) * w + xx / 2) * c;
                let dst = (y * w2 + xx) * c;
                out[dst..dst + c].copy_from_slice(&vx.data()[src..src + c]);
            }
        }
        self.push(Tensor::from_vec(&[h2 * w2, c], out), Op::Upsample2 { x, h, w })
    }

    /// Average pooling with window and stride `f` over a `[h*w, c]` map.
    pub fn avg_pool(&mut self, x: Var, h: usize, w: usize, f: usize) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        assert!(h.is_multiple_of(f) && w.is_multiple_of(f), "avg_pool: {h}x{w} not divisible by {f}");
        let (ho, wo) = (h / f, w / f);
        let inv = S::one() / S::from_usize(f * f).unwrap();
        let mut out = vec![S::zero(); ho * wo * c];
        for y in 0..h {
            for xx in 0..w {
                let src = (y * w + xx) * c;
                let dst = ((y / f) * wo + xx / f) * c;
                for ch in 0..c {
                    out[dst + ch] += vx.data()[src + ch];
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        self.push(Tensor::from_vec(&[ho * wo, c], out), Op::AvgPool { x, h, w, f })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows: width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::from_vec(&[rows, c], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![S::zero(); r * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), r, "concat_cols: height mismatch");
            for i in 0..r {
                data[i * total + off..i * total + off + wd].copy_from_slice(v.row(i));
            }
            off += wd;
        }
        self.push(Tensor::from_vec(&[r, total], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        assert!(start < end && end <= vx.rows(), "slice_rows: bad range");
        let data = vx.data()[start * c..end * c].to_vec();
        self.push(Tensor::from_vec(&[end - start, c], data), Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        assert!(start < end && end <= c, "slice_cols: bad range");
        let wd = end - start;
        let mut data = Vec::with_capacity(r * wd);
        for i in 0..r {
            data.extend_from_slice(&vx.row(i)[start..end]);
        }
        self.push(Tensor::from_vec(&[r, wd], data), Op::SliceCols { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Mean per-row cross-entropy of `logits[n, k]` against integer targets.
    /// `mask` (length `k`) excludes classes from the softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<[usize]>, mask: Option<&[bool]>) -> Var {
        let vl = self.value(logits);
        let (n, k) = (vl.rows(), vl.cols());
        assert_eq!(targets.len(), n, "cross_entropy: target count");
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        for (i, (src, dst)) in vl.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            softmax_row(src, dst, |j| mask.is_none_or(|m| m[j]));
            let p = dst[targets[i]].max(S::min_positive_value());
            loss -= p.ln();
        }
        let loss = loss / S::from_usize(n).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Soft Dice loss `1 - mean_c (2 I_c + s) / (P_c + G_c + s)` over the classes
    /// flagged in `classes`, given per-row probabilities `probs[n, k]`.
    pub fn dice_loss(&mut self, probs: Var, targets: Arc<[usize]>, classes: Arc<[bool]>, smooth: S) -> Var {
        let vp = self.value(probs);
        let k = vp.cols();
        assert_eq!(classes.len(), k);
        let stats = dice_stats(vp, &targets, k);
        let mut acc = S::zero();
        let mut count = 0usize;
        for c in 0..k {
            if !classes[c] {
                continue;
            }
            let (i, u) = stats[c];
            acc += (S::from_f64_lossy(2.0) * i + smooth) / (u + smooth);
            count += 1;
        }
        let loss = S::one() - acc / S::from_usize(count.max(1)).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::Dice {
                probs,
                targets,
                classes,
                smooth,
            },
        )
    }

    /// Gradients of scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, self.value(*a).shape(), |d| add_into(d, gd));
                accumulate(grads, *b, self.value(*b).shape(), |d| add_into(d, gd));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, self.value(*a).shape(), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += g * y;
                    }
                });
                accumulate(grads, *b, self.value(*b).shape(), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let c = self.value(*x).cols();
                accumulate(grads, *x, self.value(*x).shape(), |d| add_into(d, gd));
                accumulate(grads, *row, self.value(*row).shape(), |d| {
                    for chunk in gd.chunks(c) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let vx = self.value(*x);
                let vr = self.value(*row).data();
                let c = vx.cols();
                accumulate(grads, *x, vx.shape(), |d| {
                    for (dc, gc) in d.chunks_mut(c).zip(gd.chunks(c)) {
                        for ((d, &g), &r) in dc.iter_mut().zip(gc).zip(vr) {
                            *d += g * r;
                        }
                    }
                });
                accumulate(grads, *row, self.value(*row).shape(), |d| {
                    for (xc, gc) in vx.data().chunks(c).zip(gd.chunks(c)) {
                        for ((d, &g), &xv) in d.iter_mut().zip(gc).zip(xc) {
                            *d += g * xv;
                        }
                    }
                });
            }
            Op::AddCol(x, col) => {
                let c = self.value(*x).cols();
                accumulate(grads, *x, self.value(*x).shape(), |d| add_into(d, gd));
                accumulate(grads, *col, self.value(*col).shape(), |d| {
                    for (dv, gc) in d.iter_mut().zip(gd.chunks(c)) {
                        *dv += gc.iter().copied().sum::<S>();
                    }
                });
            }
            Op::MulCol(x, col) => {
                let vx = self.value(*x);
                let vc = self.value(*col).data();
                let c = vx.cols();
                accumulate(grads, *x, vx.shape(), |d| {
                    for ((dc, gc), &s) in d.chunks_mut(c).zip(gd.chunks(c)).zip(vc) {
                        for (d, &g) in dc.iter_mut().zip(gc) {
                            *d += g * s;
                        }
                    }
                });
                accumulate(grads, *col, self.value(*col).shape(), |d| {
                    for ((dv, gc), xc) in d.iter_mut().zip(gd.chunks(c)).zip(vx.data().chunks(c)) {
                        *dv += gc.iter().zip(xc).map(|(&g, &xv)| g * xv).sum::<S>();
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for (d, &g) in d.iter_mut().zip(gd) {
                        *d += g * s;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                accumulate(grads, *a, va.shape(), |d| matmul_nt_acc(gd, vb.data(), d, m, k, n));
                accumulate(grads, *b, vb.shape(), |d| matmul_tn_acc(va.data(), gd, d, m, k, n));
            }
            Op::Transpose(x) => {
                let vx = self.value(*x);
                let (r, c) = (vx.rows(), vx.cols());
                accumulate(grads, *x, vx.shape(), |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(gd).zip(vx) {
                        if v > S::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(gd).zip(vx) {
                        *d += g * gelu_grad(v);
                    }
                });
            }
            Op::Softmax { x, .. } => {
                let y = node.value.data();
                let c = node.value.cols();
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for ((dc, gc), yc) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let dot: S = gc.iter().zip(yc).map(|(&g, &p)| g * p).sum();
                        for ((d, &g), &p) in dc.iter_mut().zip(gc).zip(yc) {
                            *d += p * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let c = node.value.cols();
                let cn = S::from_usize(c).unwrap();
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for (r, (dc, gc)) in d.chunks_mut(c).zip(gd.chunks(c)).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let sum_g: S = gc.iter().copied().sum();
                        let sum_gx: S = gc.iter().zip(xh).map(|(&g, &v)| g * v).sum();
                        let is = inv_std[r];
                        for ((d, &g), &v) in dc.iter_mut().zip(gc).zip(xh) {
                            *d += is / cn * (cn * g - sum_g - v * sum_gx);
                        }
                    }
                });
            }
            Op::Im2col { x, geom } => {
                let ConvGeom { h, w, c, k, stride, pad, ho, wo } = *geom;
                let kc = k * k * c;
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let grow = &gd[(oy * wo + ox) * kc..(oy * wo + ox + 1) * kc];
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let dst = (iy as usize * w + ix as usize) * c;
                                    let src = (ky * k + kx) * c;
                                    add_into(&mut d[dst..dst + c], &grow[src..src + c]);
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = node.value.cols();
                let w2 = 2 * w;
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            let src = (y * w2 + xx) * c;
                            let dst = ((y / 2) * w + xx / 2) * c;
                            add_into(&mut d[dst..dst + c], &gd[src..src + c]);
                        }
                    }
                });
            }
            Op::AvgPool { x, h, w, f } => {
                let (h, w, f) = (*h, *w, *f);
                let c = node.value.cols();
                let wo = w / f;
                let inv = S::one() / S::from_usize(f * f).unwrap();
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = (y * w + xx) * c;
                            let src = ((y / f) * wo + xx / f) * c;
                            for ch in 0..c {
                                d[dst + ch] += gd[src + ch] * inv;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    accumulate(grads, p, self.value(p).shape(), |d| add_into(d, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let wd = self.value(p).cols();
                    accumulate(grads, p, self.value(p).shape(), |d| {
                        for i in 0..r {
                            add_into(&mut d[i * wd..(i + 1) * wd], &gd[i * total + off..i * total + off + wd]);
                        }
                    });
                    off += wd;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let off = start * c;
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    add_into(&mut d[off..off + gd.len()], gd)
                });
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                let wd = node.value.cols();
                let c = self.value(*x).cols();
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for (i, gc) in gd.chunks(wd).enumerate() {
                        add_into(&mut d[i * c + start..i * c + start + wd], gc);
                    }
                });
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, self.value(*x).shape(), |d| add_into(d, gd));
            }
            Op::SumAll(x) => {
                let s = gd[0];
                accumulate(grads, *x, self.value(*x).shape(), |d| {
                    for d in d.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.value(*logits).cols();
                let n = targets.len();
                let scale = gd[0] / S::from_usize(n).unwrap();
                accumulate(grads, *logits, self.value(*logits).shape(), |d| {
                    for (i, (dc, pc)) in d.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (j, (d, &p)) in dc.iter_mut().zip(pc).enumerate() {
                            let y = if j == targets[i] { S::one() } else { S::zero() };
                            *d += scale * (p - y);
                        }
                    }
                });
            }
            Op::Dice {
                probs,
                targets,
                classes,
                smooth,
            } => {
                let vp = self.value(*probs);
                let k = vp.cols();
                let stats = dice_stats(vp, targets, k);
                let count = classes.iter().filter(|&&c| c).count().max(1);
                let scale = gd[0] / S::from_usize(count).unwrap();
                let two = S::from_f64_lossy(2.0);
                let coef: Vec<(S, S)> = stats
                    .iter()
                    .map(|&(i, u)| {
                        let den = u + *smooth;
                        (two / den, (two * i + *smooth) / (den * den))
                    })
                    .collect();
                accumulate(grads, *probs, vp.shape(), |d| {
                    for (r, dc) in d.chunks_mut(k).enumerate() {
                        for (c, dv) in dc.iter_mut().enumerate() {
                            if !classes[c] {
                                continue;
                            }
                            let y = if targets[r] == c { S::one() } else { S::zero() };
                            let (a, b) = coef[c];
                            // d/dp of -(2I+s)/(U+s)
                            *dv -= scale * (a * y - b);
                        }
                    }
                });
            }
        }
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    v: Var,
    shape: &[usize],
    f: impl FnOnce(&mut [S]),
) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_row<S: Scalar>(src: &[S], dst: &mut [S], allowed: impl Fn(usize) -> bool) {
    let mut max = S::neg_infinity();
    for (j, &v) in src.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    assert!((0..src.len()).any(&allowed), "softmax row has no admissible entry");
    if max == S::neg_infinity() {
        // only NaN or -inf logits: let the NaN reach the loss
        for (j, d) in dst.iter_mut().enumerate() {
            *d = if allowed(j) { S::nan() } else { S::zero() };
        }
        return;
    }
    let mut sum = S::zero();
    for (j, (d, &v)) in dst.iter_mut().zip(src).enumerate() {
        *d = if allowed(j) { (v - max).exp() } else { S::zero() };
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// Per-class (intersection, prob mass + target count).
fn dice_stats<S: Scalar>(probs: &Tensor<S>, targets: &[usize], k: usize) -> Vec<(S, S)> {
    let mut stats = vec![(S::zero(), S::zero()); k];
    for (r, pc) in probs.data().chunks(k).enumerate() {
        for (c, &p) in pc.iter().enumerate() {
            stats[c].1 += p;
            if targets[r] == c {
                stats[c].0 += p;
            }
        }
        stats[targets[r]].1 += S::one();
    }
    stats
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}
