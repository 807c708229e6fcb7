//! The recording tape and every differentiable primitive.
//!
//! Each method evaluates its primitive eagerly, appends one node holding the
//! output value, and returns a [`Var`] handle. Nodes only ever refer to
//! earlier nodes, so the node list is already in topological order and the
//! backward sweep is a single reverse pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, k: Var, bias: Option<Var>, dilation: usize },
    RepeatChannels { x: Var },
    ConcatChannels { parts: Vec<Var> },
    AvgPool { x: Var, stride: usize },
    MeanAxis { x: Var, axis: usize },
    ScaleChannels { x: Var, s: Var },
    ScaleTime { x: Var, s: Var },
    Transpose12 { x: Var },
    Add(Var, Var),
    Mul(Var, Var),
    AddRows { x: Var, v: Var },
    AddConst { x: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    RowDot { x: Var, w: Var },
    WeightedSum { a: Var, x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    GatherEntries { p: Var, pairs: Vec<(usize, usize)> },
    ScaleRows { x: Var, s: Var },
    StraightThrough { soft: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: the gradient of every node reached from the
/// loss, plus the per-parameter totals.
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to any recorded node, `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.binary_search_by_key(&id.index(), |(p, _)| p.index()).ok().map(|i| &self.params[i].1)
    }

    /// Per-parameter gradient totals, one entry per reached parameter in id
    /// order.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Adds parameter gradients into the store. Frozen parameters are skipped.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

fn add_grad(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn shape3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::shape(op, t.shape(), &[0, 0, 0])),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// Stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = libm::exp(v - m);
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {:?}", op);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant input. It can still be differentiated against via
    /// [`Gradients::wrt`], it just is not a parameter.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (inp, outp) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [outp] {
                return Err(Error::shape("linear bias", self.value(b).shape(), &[outp]));
            }
        }
        let rows = rows_of(xs);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = outp;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; rows * outp];
        for r in 0..rows {
            let o = &mut out[r * outp..(r + 1) * outp];
            if let Some(b) = b {
                o.copy_from_slice(self.nodes[b.0].value.data());
            }
            for j in 0..inp {
                let a = xv[r * inp + j];
                if a == 0.0 {
                    continue;
                }
                for (oc, wc) in o.iter_mut().zip(&wv[j * outp..(j + 1) * outp]) {
                    *oc += a * wc;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Dilated 1-D convolution with "same" zero padding.
    /// `x[B, Cin, L]`, `k[Cout, Cin, K]`, optional `bias[Cout]`.
    pub fn conv1d(&mut self, x: Var, k: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let (b_, cin, len) = shape3("conv1d", self.value(x))?;
        let (cout, kcin, ks) = shape3("conv1d kernel", self.value(k))?;
        if kcin != cin {
            return Err(Error::shape("conv1d", self.value(x).shape(), self.value(k).shape()));
        }
        if ks % 2 == 0 {
            return Err(Error::config(format!("conv1d kernel length {ks} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::config("conv1d dilation must be at least 1"));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [cout] {
                return Err(Error::shape("conv1d bias", self.value(bv).shape(), &[cout]));
            }
        }
        let pad = (ks - 1) * dilation / 2;
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let mut out = vec![0.0; b_ * cout * len];
        for b in 0..b_ {
            for o in 0..cout {
                let orow = &mut out[(b * cout + o) * len..(b * cout + o + 1) * len];
                if let Some(bv) = bias {
                    let bval = self.nodes[bv.0].value.data()[o];
                    orow.iter_mut().for_each(|v| *v = bval);
                }
                for c in 0..cin {
                    let xrow = &xv[(b * cin + c) * len..(b * cin + c + 1) * len];
                    for j in 0..ks {
                        let w = kv[(o * cin + c) * ks + j];
                        // source index s = t + j*dilation - pad must lie in [0, len)
                        let shift = j * dilation;
                        let t0 = pad.saturating_sub(shift);
                        let t1 = (len + pad).saturating_sub(shift).min(len);
                        for t in t0..t1 {
                            orow[t] += w * xrow[t + shift - pad];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b_, cout, len], out)?;
        Ok(self.push(t, Op::Conv1d { x, k, bias, dilation }))
    }

    /// `[B, 1, L] -> [B, C, L]` by copying the single channel.
    pub fn repeat_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let (b_, c, len) = shape3("repeat_channels", self.value(x))?;
        if c != 1 || channels == 0 {
            return Err(Error::shape("repeat_channels", self.value(x).shape(), &[b_, 1, len]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b_ * channels * len);
        for b in 0..b_ {
            for _ in 0..channels {
                out.extend_from_slice(&xv[b * len..(b + 1) * len]);
            }
        }
        let t = Tensor::new(&[b_, channels, len], out)?;
        Ok(self.push(t, Op::RepeatChannels { x }))
    }

    /// Concatenates rank-3 tensors along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptySequence("concat_channels"))?;
        let (b_, _, len) = shape3("concat_channels", self.value(first))?;
        let mut total = 0;
        for &p in parts {
            let (pb, pc, pl) = shape3("concat_channels", self.value(p))?;
            if pb != b_ || pl != len {
                return Err(Error::shape("concat_channels", self.value(first).shape(), self.value(p).shape()));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(b_ * total * len);
        for b in 0..b_ {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                out.extend_from_slice(&pv.data()[b * pc * len..(b + 1) * pc * len]);
            }
        }
        let t = Tensor::new(&[b_, total, len], out)?;
        Ok(self.push(t, Op::ConcatChannels { parts: parts.to_vec() }))
    }

    /// Non-overlapping mean pooling over the last axis.
    pub fn avg_pool(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let len = *xs.last().unwrap();
        if stride == 0 || !len.is_multiple_of(stride) {
            return Err(Error::config(format!("pool stride {stride} must divide length {len}")));
        }
        let rows = rows_of(&xs);
        let olen = len / stride;
        let xv = self.value(x).data();
        let inv = 1.0 / stride as f64;
        let mut out = vec![0.0; rows * olen];
        for r in 0..rows {
            for t in 0..olen {
                let s: f64 = xv[r * len + t * stride..r * len + (t + 1) * stride].iter().sum();
                out[r * olen + t] = s * inv;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = olen;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::AvgPool { x, stride }))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() || xs.len() < 2 {
            return Err(Error::shape("mean_axis", &xs, &[axis]));
        }
        let outer: usize = xs[..axis].iter().product();
        let n = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xv[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = xs;
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MeanAxis { x, axis }))
    }

    /// `x[B, C, T] * s[B, C]` broadcast over T.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b_, c, len) = shape3("scale_channels", self.value(x))?;
        if self.value(s).shape() != [b_, c] {
            return Err(Error::shape("scale_channels", self.value(x).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (r, chunk) in out.chunks_mut(len).enumerate() {
            let f = sv[r];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let t = Tensor::new(&[b_, c, len], out)?;
        Ok(self.push(t, Op::ScaleChannels { x, s }))
    }

    /// `x[B, C, T] * s[B, T]` broadcast over C.
    pub fn scale_time(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b_, c, len) = shape3("scale_time", self.value(x))?;
        if self.value(s).shape() != [b_, len] {
            return Err(Error::shape("scale_time", self.value(x).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for b in 0..b_ {
            let srow = &sv[b * len..(b + 1) * len];
            for ch in 0..c {
                let base = (b * c + ch) * len;
                for (v, f) in out[base..base + len].iter_mut().zip(srow) {
                    *v *= f;
                }
            }
        }
        let t = Tensor::new(&[b_, c, len], out)?;
        Ok(self.push(t, Op::ScaleTime { x, s }))
    }

    /// `[B, C, T] -> [B, T, C]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let (b_, c, len) = shape3("transpose12", self.value(x))?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b_ * c * len];
        for b in 0..b_ {
            for ch in 0..c {
                for t in 0..len {
                    out[(b * len + t) * c + ch] = xv[(b * c + ch) * len + t];
                }
            }
        }
        let t = Tensor::new(&[b_, len, c], out)?;
        Ok(self.push(t, Op::Transpose12 { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add", self.value(a).shape(), self.value(b).shape()));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("mul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut t = self.value(a).clone();
        for (x, y) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x[B, T, d] + v[B, d]` broadcast over T.
    pub fn add_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (b_, len, d) = shape3("add_rows", self.value(x))?;
        if self.value(v).shape() != [b_, d] {
            return Err(Error::shape("add_rows", self.value(x).shape(), self.value(v).shape()));
        }
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for b in 0..b_ {
            for t in 0..len {
                let base = (b * len + t) * d;
                for (o, a) in out[base..base + d].iter_mut().zip(&vv[b * d..(b + 1) * d]) {
                    *o += a;
                }
            }
        }
        let t = Tensor::new(&[b_, len, d], out)?;
        Ok(self.push(t, Op::AddRows { x, v }))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v += c);
        self.push(t, Op::AddConst { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(t, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(t, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(t, Op::Sigmoid { x })
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let w = *xt.shape().last().unwrap();
        let mut out = vec![0.0; xt.len()];
        for (src, dst) in xt.data().chunks(w).zip(out.chunks_mut(w)) {
            softmax_row(src, dst);
        }
        let t = Tensor::new(xt.shape(), out).expect("same shape");
        self.push(t, Op::Softmax { x })
    }

    /// `s[b, t] = <x[b, t, :], w>` for `x[B, T, d]`, `w[d]`.
    pub fn row_dot(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b_, len, d) = shape3("row_dot", self.value(x))?;
        if self.value(w).shape() != [d] {
            return Err(Error::shape("row_dot", self.value(x).shape(), self.value(w).shape()));
        }
        let wv = self.value(w).data();
        let out = self
            .value(x)
            .data()
            .chunks(d)
            .map(|row| row.iter().zip(wv).map(|(a, b)| a * b).sum())
            .collect();
        let t = Tensor::new(&[b_, len], out)?;
        Ok(self.push(t, Op::RowDot { x, w }))
    }

    /// `out[b, :] = sum_t a[b, t] * x[b, t, :]`.
    pub fn weighted_sum(&mut self, a: Var, x: Var) -> Result<Var> {
        let (b_, len, d) = shape3("weighted_sum", self.value(x))?;
        if self.value(a).shape() != [b_, len] {
            return Err(Error::shape("weighted_sum", self.value(a).shape(), self.value(x).shape()));
        }
        let av = self.value(a).data();
        let xv = self.value(x).data();
        let mut out = vec![0.0; b_ * d];
        for b in 0..b_ {
            for t in 0..len {
                let w = av[b * len + t];
                let row = &xv[(b * len + t) * d..(b * len + t + 1) * d];
                for (o, v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        let t = Tensor::new(&[b_, d], out)?;
        Ok(self.push(t, Op::WeightedSum { a, x }))
    }

    /// Selects slices along axis 0.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if idx.is_empty() {
            return Err(Error::EmptySequence("gather_rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xs[0]) {
            return Err(Error::shape("gather_rows", &xs, &[bad]));
        }
        let stride: usize = xs[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            out.extend_from_slice(&xv[i * stride..(i + 1) * stride]);
        }
        let mut shape = xs;
        shape[0] = idx.len();
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Inverse of [`Tape::gather_rows`]: adds row `r` of `x` into row `idx[r]`
    /// of a zero tensor with `rows` slices.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs[0] != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("scatter_rows", &xs, &[idx.len(), rows]));
        }
        let stride: usize = xs[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * stride];
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in out[i * stride..(i + 1) * stride].iter_mut().zip(&xv[r * stride..(r + 1) * stride]) {
                *o += v;
            }
        }
        let mut shape = xs;
        shape[0] = rows;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ScatterRows { x, idx: idx.to_vec() }))
    }

    /// Picks `p[row, col]` for each pair into a vector.
    pub fn gather_entries(&mut self, p: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let ps = self.value(p).shape().to_vec();
        if ps.len() != 2 || pairs.is_empty() || pairs.iter().any(|&(r, c)| r >= ps[0] || c >= ps[1]) {
            return Err(Error::shape("gather_entries", &ps, &[pairs.len()]));
        }
        let pv = self.value(p).data();
        let out = pairs.iter().map(|&(r, c)| pv[r * ps[1] + c]).collect();
        let t = Tensor::new(&[pairs.len()], out)?;
        Ok(self.push(t, Op::GatherEntries { p, pairs: pairs.to_vec() }))
    }

    /// Multiplies slice `r` (along axis 0) of `x` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if self.value(s).shape() != [xs[0]] {
            return Err(Error::shape("scale_rows", &xs, self.value(s).shape()));
        }
        let stride: usize = xs[1..].iter().product();
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (r, chunk) in out.chunks_mut(stride).enumerate() {
            let f = sv[r];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(t, Op::ScaleRows { x, s }))
    }

    /// Forward value is `hard`, backward is the identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::shape("straight_through", hard.shape(), self.value(soft).shape()));
        }
        Ok(self.push(hard, Op::StraightThrough { soft }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let ls = lt.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape("cross_entropy", ls, &[labels.len()]));
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; lt.len()];
        let mut loss = 0.0;
        for (r, (row, out)) in lt.data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            softmax_row(row, out);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            loss += lse - row[labels[r]];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        // a parameter placed on the tape several times gets one summed entry
        params.sort_by_key(|(id, _)| id.index());
        let mut merged: Vec<(ParamId, Tensor)> = Vec::with_capacity(params.len());
        for (id, g) in params {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => acc.add_assign(&g),
                _ => merged.push((id, g)),
            }
        }
        Ok(Gradients { nodes: grads, params: merged })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Vec<(ParamId, Tensor)>,
    ) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gv = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.push((*id, g.clone())),
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (inp, outp) = (wt.shape()[0], wt.shape()[1]);
                let rows = rows_of(xt.shape());
                let xv = xt.data();
                let wv = wt.data();
                let mut dx = vec![0.0; xt.len()];
                let mut dw = vec![0.0; wt.len()];
                for r in 0..rows {
                    let grow = &gv[r * outp..(r + 1) * outp];
                    for j in 0..inp {
                        let wrow = &wv[j * outp..(j + 1) * outp];
                        dx[r * inp + j] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        let a = xv[r * inp + j];
                        if a != 0.0 {
                            for (d, gc) in dw[j * outp..(j + 1) * outp].iter_mut().zip(grow) {
                                *d += a * gc;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; outp];
                    for grow in gv.chunks(outp) {
                        for (d, gc) in db.iter_mut().zip(grow) {
                            *d += gc;
                        }
                    }
                    add_grad(&mut grads[b.0], Tensor::from_vec(db));
                }
                add_grad(&mut grads[x.0], Tensor::new(xt.shape(), dx).unwrap());
                add_grad(&mut grads[w.0], Tensor::new(wt.shape(), dw).unwrap());
            }
            Op::Conv1d { x, k, bias, dilation } => {
                let xt = self.value(*x);
                let kt = self.value(*k);
                let (b_, cin, len) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let (cout, ks) = (kt.shape()[0], kt.shape()[2]);
                let pad = (ks - 1) * dilation / 2;
                let xv = xt.data();
                let kv = kt.data();
                let mut dx = vec![0.0; xt.len()];
                let mut dk = vec![0.0; kt.len()];
                let mut db = vec![0.0; cout];
                for b in 0..b_ {
                    for o in 0..cout {
                        let grow = &gv[(b * cout + o) * len..(b * cout + o + 1) * len];
                        db[o] += grow.iter().sum::<f64>();
                        for c in 0..cin {
                            let base = (b * cin + c) * len;
                            for j in 0..ks {
                                let kidx = (o * cin + c) * ks + j;
                                let w = kv[kidx];
                                let shift = j * dilation;
                                let t0 = pad.saturating_sub(shift);
                                let t1 = (len + pad).saturating_sub(shift).min(len);
                                let mut acc = 0.0;
                                for t in t0..t1 {
                                    let s = base + t + shift - pad;
                                    acc += grow[t] * xv[s];
                                    dx[s] += grow[t] * w;
                                }
                                dk[kidx] += acc;
                            }
                        }
                    }
                }
                if let Some(bv) = bias {
                    add_grad(&mut grads[bv.0], Tensor::from_vec(db));
                }
                add_grad(&mut grads[x.0], Tensor::new(xt.shape(), dx).unwrap());
                add_grad(&mut grads[k.0], Tensor::new(kt.shape(), dk).unwrap());
            }
            Op::RepeatChannels { x } => {
                let xs = self.value(*x).shape();
                let (b_, len) = (xs[0], xs[2]);
                let c = out.shape()[1];
                let mut dx = vec![0.0; b_ * len];
                for b in 0..b_ {
                    for ch in 0..c {
                        let src = &gv[(b * c + ch) * len..(b * c + ch + 1) * len];
                        for (d, s) in dx[b * len..(b + 1) * len].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(xs, dx).unwrap());
            }
            Op::ConcatChannels { parts } => {
                let (b_, total, len) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let mut offset = 0;
                for p in parts {
                    let ps = self.value(*p).shape();
                    let pc = ps[1];
                    let mut dp = Vec::with_capacity(b_ * pc * len);
                    for b in 0..b_ {
                        let start = (b * total + offset) * len;
                        dp.extend_from_slice(&gv[start..start + pc * len]);
                    }
                    add_grad(&mut grads[p.0], Tensor::new(ps, dp).unwrap());
                    offset += pc;
                }
            }
            Op::AvgPool { x, stride } => {
                let xs = self.value(*x).shape();
                let olen = *out.shape().last().unwrap();
                let inv = 1.0 / *stride as f64;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, grow) in gv.chunks(olen).enumerate() {
                    for (t, gval) in grow.iter().enumerate() {
                        let base = r * olen * stride + t * stride;
                        dx[base..base + stride].iter_mut().for_each(|d| *d = gval * inv);
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(xs, dx).unwrap());
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.value(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let n = xs[*axis];
                let inner: usize = xs[axis + 1..].iter().product();
                let inv = 1.0 / n as f64;
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let src = &gv[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        for (d, s) in dx[(o * n + a) * inner..(o * n + a + 1) * inner].iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(xs, dx).unwrap());
            }
            Op::ScaleChannels { x, s } => {
                let xt = self.value(*x);
                let st = self.value(*s);
                let len = xt.shape()[2];
                let mut dx = gv.to_vec();
                let mut ds = vec![0.0; st.len()];
                for (r, (dchunk, xchunk)) in dx.chunks_mut(len).zip(xt.data().chunks(len)).enumerate() {
                    let f = st.data()[r];
                    ds[r] = dchunk.iter().zip(xchunk).map(|(a, b)| a * b).sum();
                    dchunk.iter_mut().for_each(|v| *v *= f);
                }
                add_grad(&mut grads[x.0], Tensor::new(xt.shape(), dx).unwrap());
                add_grad(&mut grads[s.0], Tensor::new(st.shape(), ds).unwrap());
            }
            Op::ScaleTime { x, s } => {
                let xt = self.value(*x);
                let st = self.value(*s);
                let (b_, c, len) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let xv = xt.data();
                let sv = st.data();
                let mut dx = vec![0.0; xt.len()];
                let mut ds = vec![0.0; st.len()];
                for b in 0..b_ {
                    for ch in 0..c {
                        let base = (b * c + ch) * len;
                        for t in 0..len {
                            dx[base + t] = gv[base + t] * sv[b * len + t];
                            ds[b * len + t] += gv[base + t] * xv[base + t];
                        }
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(xt.shape(), dx).unwrap());
                add_grad(&mut grads[s.0], Tensor::new(st.shape(), ds).unwrap());
            }
            Op::Transpose12 { x } => {
                let xs = self.value(*x).shape();
                let (b_, c, len) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![0.0; b_ * c * len];
                for b in 0..b_ {
                    for ch in 0..c {
                        for t in 0..len {
                            dx[(b * c + ch) * len + t] = gv[(b * len + t) * c + ch];
                        }
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(xs, dx).unwrap());
            }
            Op::Add(a, b) => {
                add_grad(&mut grads[a.0], g.clone());
                add_grad(&mut grads[b.0], g.clone());
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (d, v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *d *= v;
                }
                let mut db = g.clone();
                for (d, v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d *= v;
                }
                add_grad(&mut grads[a.0], da);
                add_grad(&mut grads[b.0], db);
            }
            Op::AddRows { x, v } => {
                let (b_, len, d) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let mut dv = vec![0.0; b_ * d];
                for b in 0..b_ {
                    for t in 0..len {
                        let base = (b * len + t) * d;
                        for (o, s) in dv[b * d..(b + 1) * d].iter_mut().zip(&gv[base..base + d]) {
                            *o += s;
                        }
                    }
                }
                add_grad(&mut grads[x.0], g.clone());
                add_grad(&mut grads[v.0], Tensor::new(&[b_, d], dv).unwrap());
            }
            Op::AddConst { x } => add_grad(&mut grads[x.0], g.clone()),
            Op::Scale { x, c } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= c);
                add_grad(&mut grads[x.0], dx);
            }
            Op::Sum { x } => {
                let xs = self.value(*x).shape();
                add_grad(&mut grads[x.0], Tensor::full(xs, gv[0]));
            }
            Op::Relu { x } => {
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                add_grad(&mut grads[x.0], dx);
            }
            Op::Sigmoid { x } => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= y * (1.0 - y);
                }
                add_grad(&mut grads[x.0], dx);
            }
            Op::Softmax { x } => {
                let w = *out.shape().last().unwrap();
                let mut dx = vec![0.0; out.len()];
                for ((d, y), gr) in dx.chunks_mut(w).zip(out.data().chunks(w)).zip(gv.chunks(w)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(out.shape(), dx).unwrap());
            }
            Op::RowDot { x, w } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let d = wt.len();
                let mut dx = vec![0.0; xt.len()];
                let mut dw = vec![0.0; d];
                for (r, xrow) in xt.data().chunks(d).enumerate() {
                    let gr = gv[r];
                    for j in 0..d {
                        dx[r * d + j] = gr * wt.data()[j];
                        dw[j] += gr * xrow[j];
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(xt.shape(), dx).unwrap());
                add_grad(&mut grads[w.0], Tensor::new(wt.shape(), dw).unwrap());
            }
            Op::WeightedSum { a, x } => {
                let at = self.value(*a);
                let xt = self.value(*x);
                let (b_, len, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let mut da = vec![0.0; at.len()];
                let mut dx = vec![0.0; xt.len()];
                for b in 0..b_ {
                    let grow = &gv[b * d..(b + 1) * d];
                    for t in 0..len {
                        let base = (b * len + t) * d;
                        let xrow = &xt.data()[base..base + d];
                        da[b * len + t] = grow.iter().zip(xrow).map(|(p, q)| p * q).sum();
                        let wgt = at.data()[b * len + t];
                        for (dd, gg) in dx[base..base + d].iter_mut().zip(grow) {
                            *dd = wgt * gg;
                        }
                    }
                }
                add_grad(&mut grads[a.0], Tensor::new(at.shape(), da).unwrap());
                add_grad(&mut grads[x.0], Tensor::new(xt.shape(), dx).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let xs = self.value(*x).shape();
                let stride: usize = xs[1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, s) in dx[i * stride..(i + 1) * stride].iter_mut().zip(&gv[r * stride..(r + 1) * stride]) {
                        *d += s;
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(xs, dx).unwrap());
            }
            Op::ScatterRows { x, idx } => {
                let xs = self.value(*x).shape();
                let stride: usize = xs[1..].iter().product();
                let mut dx = Vec::with_capacity(idx.len() * stride);
                for &i in idx {
                    dx.extend_from_slice(&gv[i * stride..(i + 1) * stride]);
                }
                add_grad(&mut grads[x.0], Tensor::new(xs, dx).unwrap());
            }
            Op::GatherEntries { p, pairs } => {
                let ps = self.value(*p).shape();
                let mut dp = vec![0.0; self.value(*p).len()];
                for (r, &(row, col)) in pairs.iter().enumerate() {
                    dp[row * ps[1] + col] += gv[r];
                }
                add_grad(&mut grads[p.0], Tensor::new(ps, dp).unwrap());
            }
            Op::ScaleRows { x, s } => {
                let xt = self.value(*x);
                let st = self.value(*s);
                let stride = xt.len() / st.len();
                let mut dx = gv.to_vec();
                let mut ds = vec![0.0; st.len()];
                for (r, (dchunk, xchunk)) in dx.chunks_mut(stride).zip(xt.data().chunks(stride)).enumerate() {
                    ds[r] = dchunk.iter().zip(xchunk).map(|(a, b)| a * b).sum();
                    let f = st.data()[r];
                    dchunk.iter_mut().for_each(|v| *v *= f);
                }
                add_grad(&mut grads[x.0], Tensor::new(xt.shape(), dx).unwrap());
                add_grad(&mut grads[s.0], Tensor::new(st.shape(), ds).unwrap());
            }
            Op::StraightThrough { soft } => add_grad(&mut grads[soft.0], g.clone()),
            Op::CrossEntropy { logits, labels, probs } => {
                let ls = self.value(*logits).shape();
                let c = ls[1];
                let scale = gv[0] / labels.len() as f64;
                let mut dl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * c + l] -= 1.0;
                }
                dl.iter_mut().for_each(|v| *v *= scale);
                add_grad(&mut grads[logits.0], Tensor::new(ls, dl).unwrap());
            }
        }
    }
}

/// Backward from `loss`, accumulating into the trainable parameters of `store`.
pub fn backward(tape: &Tape, loss: Var, store: &mut ParamStore) -> Result<()> {
    tape.gradients(loss)?.accumulate_into(store);
    Ok(())
}
