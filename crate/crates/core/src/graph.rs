//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every kernel application in execution order, so node
//! ids are already a topological order: inputs always precede their
//! consumers. [`Graph::backward`] walks the tape once in reverse from a
//! scalar root. Parameters enter the tape through [`Graph::param`] and their
//! gradients come back keyed by [`ParamId`].
//!
//! Kernels that matter for speed (attention with bucketed relative bias,
//! strided convolution, cross entropy) are fused ops with hand-written
//! backward passes; each one is covered by a finite-difference check.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention problem inside a batched attention call: a block of query
/// rows attending to a block of key/value rows.
#[derive(Debug, Clone)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Row index into the bias table for every (query, key) pair,
    /// `q_len * k_len` entries, row-major.
    pub buckets: Option<Arc<[u32]>>,
}

#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub heads: usize,
    pub causal: bool,
    pub segments: Vec<AttnSegment>,
}

/// Geometry of a batched NHWC convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sum(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // per row: (mean, 1/std)
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        table: Option<Var>,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    differentiated: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(v, _)| *v == var).map(|(_, t)| t)
    }

    /// Accumulates another pass's parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    /// Global L2 norm across all parameter gradients.
    pub fn norm(&self) -> f64 {
        let sq: f64 = self
            .params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum();
        math::sqrt(sq)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf holding `value`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Brings a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `[.., k] x [k, n] -> [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, r) in chunk.iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_fn(ta.shape(), |i| {
            let x = ta.data()[i];
            0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
        });
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Normalizes each row over the last axis, then applies gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d == 0 {
            return Err(shape_err("layernorm", tx, tg));
        }
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layernorm", tx, tg));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * d];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / math::sqrt(var + eps);
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * rstd * tg.data()[c] + tb.data()[c];
            }
            stats.push((mean, rstd));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    /// Looks up rows of `table` (`[V, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    size: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks 2-D blocks with a common width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let d = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects (and possibly repeats or reorders) rows of a 2-D block.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        let (n, d) = (ts.rows(), ts.cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Shape {
                    op: "gather_rows",
                    lhs: ts.shape().to_vec(),
                    rhs: vec![r],
                });
            }
            out.extend_from_slice(ts.row(r));
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(src);
        Ok(self.push(
            t,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `[Nq, d]`, `k` and `v` are `[Nk, d]` with `d = heads * dh`.
    /// Each segment is an independent attention problem over contiguous
    /// row blocks. When a segment carries buckets, `table` (`[buckets,
    /// heads]`) supplies an additive logit bias per (query, key, head).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        table: Option<Var>,
        layout: AttnLayout,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let h = layout.heads;
        if h == 0 || d % h != 0 || tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(shape_err("attention", tq, tk));
        }
        if let Some(t) = table {
            if self.value(t).cols() != h {
                return Err(shape_err("attention bias", tq, self.value(t)));
            }
        }
        let dh = d / h;
        let scale = 1.0 / math::sqrt(dh as f64);
        let nq = tq.rows();
        let nk = tk.rows();
        let table_data = table.map(|t| self.value(t));
        let mut out = vec![0.0; nq * d];
        let total: usize = layout.segments.iter().map(|s| s.q_len * s.k_len * h).sum();
        let mut probs = vec![0.0; total];
        let mut offset = 0;
        for seg in &layout.segments {
            if seg.q_start + seg.q_len > nq || seg.k_start + seg.k_len > nk {
                return Err(shape_err("attention segment", tq, tk));
            }
            if layout.causal && seg.q_len != seg.k_len {
                return Err(shape_err("causal attention", tq, tk));
            }
            if let Some(b) = &seg.buckets {
                if b.len() != seg.q_len * seg.k_len || table.is_none() {
                    return Err(shape_err("attention buckets", tq, tk));
                }
            }
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..seg.q_len {
                    let qrow = &tq.data()[(seg.q_start + i) * d + c0..(seg.q_start + i) * d + c0 + dh];
                    let p = &mut probs[offset..offset + seg.k_len];
                    let limit = if layout.causal { i + 1 } else { seg.k_len };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        let krow = &tk.data()[(seg.k_start + j) * d + c0..(seg.k_start + j) * d + c0 + dh];
                        let mut s = scale * dot(qrow, krow);
                        if let (Some(b), Some(t)) = (&seg.buckets, table_data) {
                            s += t.data()[b[i * seg.k_len + j] as usize * h + head];
                        }
                        p[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut z = 0.0;
                    for pj in p.iter_mut().take(limit) {
                        *pj = math::exp(*pj - max);
                        z += *pj;
                    }
                    for pj in p.iter_mut().take(limit) {
                        *pj /= z;
                    }
                    for pj in p.iter_mut().skip(limit) {
                        *pj = 0.0;
                    }
                    let orow = &mut out[(seg.q_start + i) * d + c0..(seg.q_start + i) * d + c0 + dh];
                    for j in 0..limit {
                        let vrow = &tv.data()[(seg.k_start + j) * d + c0..(seg.k_start + j) * d + c0 + dh];
                        axpy(p[j], vrow, orow);
                    }
                    offset += seg.k_len;
                }
            }
        }
        let t = Tensor::new(vec![nq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || table.is_some_and(|t| self.rg(t));
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                table,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Direct NHWC convolution. `w` is `[kernel * kernel * in_c, out_c]`,
    /// ordered `(ky, kx, c)`; `b` is `[out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let g = geom;
        let expected_x = [g.batch, g.in_h, g.in_w, g.in_c];
        if tx.shape() != expected_x
            || tw.shape() != [g.patch(), g.out_c]
            || tb.len() != g.out_c
            || g.stride == 0
            || g.kernel == 0
            || g.in_h + 2 * g.pad < g.kernel
            || g.in_w + 2 * g.pad < g.kernel
        {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (oh, ow) = (g.out_h(), g.out_w());
        let positions = oh * ow;
        let mut out = vec![0.0; g.batch * positions * g.out_c];
        let mut cols = vec![0.0; positions * g.patch()];
        for n in 0..g.batch {
            im2col(tx.data(), n, &g, &mut cols);
            let dst = &mut out[n * positions * g.out_c..(n + 1) * positions * g.out_c];
            matmul_into(&cols, tw.data(), dst, positions, g.patch(), g.out_c);
            for row in dst.chunks_mut(g.out_c) {
                for (o, bias) in row.iter_mut().zip(tb.data()) {
                    *o += bias;
                }
            }
        }
        let t = Tensor::new(vec![g.batch, oh, ow, g.out_c], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[T, V]`), skipping positions equal to `ignore`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let tl = self.value(logits);
        let (t_len, v) = (tl.rows(), tl.cols());
        if targets.len() != t_len || t_len == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t_len * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &target) in targets.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = math::exp(x - max);
                z += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            if target == ignore {
                continue;
            }
            if target >= v {
                return Err(Error::TargetOutOfRange {
                    id: target,
                    classes: v,
                });
            }
            // log-sum-exp form keeps the loss exact when probabilities underflow
            total += max + math::ln(z) - row[target];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        // clamp rounding below zero; a comparison keeps NaN visible, f64::max would not
        let mean = total / count as f64;
        let loss = if mean < 0.0 { 0.0 } else { mean };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// A graph can be differentiated once; a second call is rejected so
    /// stale gradients can never be silently re-accumulated.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(root.0));
        }
        if self.differentiated {
            return Err(Error::AlreadyDifferentiated);
        }
        let rt = &self.nodes[root.0].value;
        if !rt.is_scalar() {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(gout);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        let ga = acc(&mut grads, *a, ta.len());
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] += dot(grow, &tb.data()[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    if self.rg(*b) {
                        let gb = acc(&mut grads, *b, tb.len());
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ta.data()[i * k + p];
                                if av != 0.0 {
                                    axpy(av, grow, &mut gb[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if self.rg(x) {
                            let g = acc(&mut grads, x, gout.len());
                            axpy(1.0, &gout, g);
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*a) {
                        let g = acc(&mut grads, *a, gout.len());
                        axpy(1.0, &gout, g);
                    }
                    if self.rg(*row) {
                        let n = self.value(*row).len();
                        let g = acc(&mut grads, *row, n);
                        for chunk in gout.chunks(n.max(1)) {
                            axpy(1.0, chunk, g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let g = acc(&mut grads, *a, gout.len());
                        for i in 0..g.len() {
                            g[i] += gout[i] * tb.data()[i];
                        }
                    }
                    if self.rg(*b) {
                        let g = acc(&mut grads, *b, gout.len());
                        for i in 0..g.len() {
                            g[i] += gout[i] * ta.data()[i];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let g = acc(&mut grads, *a, gout.len());
                    axpy(*s, &gout, g);
                }
                Op::Gelu(a) => {
                    let ta = self.value(*a);
                    let g = acc(&mut grads, *a, gout.len());
                    for i in 0..g.len() {
                        let x = ta.data()[i];
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = math::tanh(u);
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g[i] += gout[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let g = acc(&mut grads, *a, n);
                    for v in g.iter_mut() {
                        *v += gout[0];
                    }
                }
                Op::Reshape(a) => {
                    let g = acc(&mut grads, *a, gout.len());
                    axpy(1.0, &gout, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let (tx, tg) = (self.value(*x), self.value(*gain));
                    let d = tx.cols();
                    let rows = tx.rows();
                    if self.rg(*gain) {
                        let gg = acc(&mut grads, *gain, d);
                        for r in 0..rows {
                            let (mean, rstd) = stats[r];
                            for c in 0..d {
                                gg[c] += gout[r * d + c] * (tx.data()[r * d + c] - mean) * rstd;
                            }
                        }
                    }
                    if self.rg(*bias) {
                        let gb = acc(&mut grads, *bias, d);
                        for r in 0..rows {
                            axpy(1.0, &gout[r * d..(r + 1) * d], gb);
                        }
                    }
                    if self.rg(*x) {
                        let gx = acc(&mut grads, *x, rows * d);
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let (mean, rstd) = stats[r];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..d {
                                let xhat = (tx.data()[r * d + c] - mean) * rstd;
                                dxhat[c] = gout[r * d + c] * tg.data()[c];
                                m1 += dxhat[c];
                                m2 += dxhat[c] * xhat;
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for c in 0..d {
                                let xhat = (tx.data()[r * d + c] - mean) * rstd;
                                gx[r * d + c] += rstd * (dxhat[c] - m1 - xhat * m2);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let g = acc(&mut grads, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &gout[r * d..(r + 1) * d], &mut g[id * d..(id + 1) * d]);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.rg(p) {
                            let g = acc(&mut grads, p, n);
                            axpy(1.0, &gout[offset..offset + n], g);
                        }
                        offset += n;
                    }
                }
                Op::GatherRows { src, rows } => {
                    let ts = self.value(*src);
                    let d = ts.cols();
                    let g = acc(&mut grads, *src, ts.len());
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(1.0, &gout[i * d..(i + 1) * d], &mut g[r * d..(r + 1) * d]);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    table,
                    layout,
                    probs,
                } => {
                    let (q, k, v, table) = (*q, *k, *v, *table);
                    let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
                    let d = tq.cols();
                    let h = layout.heads;
                    let dh = d / h;
                    let scale = 1.0 / math::sqrt(dh as f64);
                    let mut gq = vec![0.0; tq.len()];
                    let mut gk = vec![0.0; tk.len()];
                    let mut gv = vec![0.0; tv.len()];
                    let mut gt = table.map(|t| vec![0.0; self.value(t).len()]);
                    let mut ds = Vec::new();
                    let mut offset = 0;
                    for seg in &layout.segments {
                        for head in 0..h {
                            let c0 = head * dh;
                            for i in 0..seg.q_len {
                                let p = &probs[offset..offset + seg.k_len];
                                let limit = if layout.causal { i + 1 } else { seg.k_len };
                                let qi = (seg.q_start + i) * d + c0;
                                let grow = &gout[qi..qi + dh];
                                // dP_j = dO . V_j, then softmax backward
                                ds.clear();
                                let mut dot_pg = 0.0;
                                for j in 0..limit {
                                    let kj = (seg.k_start + j) * d + c0;
                                    let dp = dot(grow, &tv.data()[kj..kj + dh]);
                                    ds.push(dp);
                                    dot_pg += dp * p[j];
                                    axpy(p[j], grow, &mut gv[kj..kj + dh]);
                                }
                                for j in 0..limit {
                                    let dsj = p[j] * (ds[j] - dot_pg);
                                    if dsj == 0.0 {
                                        continue;
                                    }
                                    let kj = (seg.k_start + j) * d + c0;
                                    axpy(scale * dsj, &tk.data()[kj..kj + dh], &mut gq[qi..qi + dh]);
                                    axpy(scale * dsj, &tq.data()[qi..qi + dh], &mut gk[kj..kj + dh]);
                                    if let (Some(b), Some(gt)) = (&seg.buckets, gt.as_mut()) {
                                        gt[b[i * seg.k_len + j] as usize * h + head] += dsj;
                                    }
                                }
                                offset += seg.k_len;
                            }
                        }
                    }
                    for (var, g) in [(q, gq), (k, gk), (v, gv)] {
                        if self.rg(var) {
                            let n = g.len();
                            axpy(1.0, &g, acc(&mut grads, var, n));
                        }
                    }
                    if let (Some(t), Some(g)) = (table, gt) {
                        if self.rg(t) {
                            let n = g.len();
                            axpy(1.0, &g, acc(&mut grads, t, n));
                        }
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let g = *geom;
                    let (x, w, b) = (*x, *w, *b);
                    let (tx, tw) = (self.value(x), self.value(w));
                    let positions = g.out_h() * g.out_w();
                    let patch = g.patch();
                    if self.rg(b) {
                        let gb = acc(&mut grads, b, g.out_c);
                        for row in gout.chunks(g.out_c) {
                            axpy(1.0, row, gb);
                        }
                    }
                    let mut cols = vec![0.0; positions * patch];
                    let mut gw = vec![0.0; patch * g.out_c];
                    let mut gx = if self.rg(x) { vec![0.0; tx.len()] } else { Vec::new() };
                    let mut dcols = vec![0.0; positions * patch];
                    for n in 0..g.batch {
                        let gy = &gout[n * positions * g.out_c..(n + 1) * positions * g.out_c];
                        if self.rg(w) {
                            im2col(tx.data(), n, &g, &mut cols);
                            for pos in 0..positions {
                                let grow = &gy[pos * g.out_c..(pos + 1) * g.out_c];
                                for p in 0..patch {
                                    let cv = cols[pos * patch + p];
                                    if cv != 0.0 {
                                        axpy(cv, grow, &mut gw[p * g.out_c..(p + 1) * g.out_c]);
                                    }
                                }
                            }
                        }
                        if self.rg(x) {
                            for pos in 0..positions {
                                let grow = &gy[pos * g.out_c..(pos + 1) * g.out_c];
                                for p in 0..patch {
                                    dcols[pos * patch + p] = dot(grow, &tw.data()[p * g.out_c..(p + 1) * g.out_c]);
                                }
                            }
                            col2im_add(&dcols, n, &g, &mut gx);
                        }
                    }
                    if self.rg(w) {
                        axpy(1.0, &gw, acc(&mut grads, w, gw.len()));
                    }
                    if self.rg(x) {
                        let n = gx.len();
                        axpy(1.0, &gx, acc(&mut grads, x, n));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                    count,
                } => {
                    let v = self.value(*logits).cols();
                    let g = acc(&mut grads, *logits, probs.len());
                    let s = gout[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        axpy(s, &probs[r * v..(r + 1) * v], &mut g[r * v..(r + 1) * v]);
                        g[r * v + t] -= s;
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            match node.op {
                Op::Param(id) => {
                    let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    if out.params.len() <= id.index() {
                        out.params.resize(id.index() + 1, None);
                    }
                    out.params[id.index()] = Some(Tensor::new(node.value.shape().to_vec(), data)?);
                }
                Op::Leaf if node.requires_grad => {
                    let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    out.leaves
                        .push((Var(idx), Tensor::new(node.value.shape().to_vec(), data)?));
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators so the loop vectorizes; the summation
    // order is fixed, so results stay deterministic
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = a[m,k] * b[k,n]`, overwriting `out`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

fn im2col(x: &[f64], n: usize, g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.patch();
    let img = &x[n * g.in_h * g.in_w * g.in_c..(n + 1) * g.in_h * g.in_w * g.in_c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let d = &mut dst[(ky * g.kernel + kx) * g.in_c..(ky * g.kernel + kx + 1) * g.in_c];
                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                        d.iter_mut().for_each(|v| *v = 0.0);
                    } else {
                        let s = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        d.copy_from_slice(&img[s..s + g.in_c]);
                    }
                }
            }
        }
    }
}

fn col2im_add(dcols: &[f64], n: usize, g: &ConvGeometry, gx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.patch();
    let base = n * g.in_h * g.in_w * g.in_c;
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &dcols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let s = base + (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let c = &src[(ky * g.kernel + kx) * g.in_c..(ky * g.kernel + kx + 1) * g.in_c];
                    axpy(1.0, c, &mut gx[s..s + g.in_c]);
                }
            }
        }
    }
}
