//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive in execution order, so node ids are a
//! topological order by construction and [`Tape::backward`] is a single reverse
//! sweep. Tensors of rank > 2 are treated as `[outer, last_dim]` matrices.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::tensor::{gelu, gelu_grad, row_stats, softmax_in_place, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `y` rows repeat over consecutive blocks of `x` rows.
    AddTiled(Var, Var),
    /// Row `g` of `y` is added to every row of the `g`-th block of `x`.
    AddGrouped(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    MeanGroups(Var, usize),
    Gather {
        sources: Vec<Var>,
        index: Vec<(u32, u32)>,
    },
    CosineRows {
        a: Var,
        b: Var,
        cos: Vec<T>,
        na: Vec<T>,
        nb: Vec<T>,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Bce {
        p: Var,
        labels: Vec<T>,
    },
    Mean(Var),
}

#[derive(Clone, Copy, Debug)]
struct AttnDims {
    batch: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    width: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation graph. Single writer; dropped after each backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.outer_len(), t.last_dim())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Enables or disables the per-op NaN/Inf check (on by default in debug builds).
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.rank() != 2 || bv.rank() != 2 {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
            }
            av.matmul(bv)?
        };
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b))
    }

    /// Adds `y` (`[r, c]`) to each consecutive block of `r` rows of `x`.
    /// With `r = 1` this is a bias add.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let (xr, xc) = dims2(xv);
        let (yr, yc) = dims2(yv);
        if xc != yc || xr % yr != 0 {
            return Err(Error::shape("add_tiled", format!("{:?} + tile {:?}", xv.shape(), yv.shape())));
        }
        let mut out = xv.clone();
        for row_block in out.data_mut().chunks_mut(yr * yc) {
            for (o, &b) in row_block.iter_mut().zip(yv.data()) {
                *o += b;
            }
        }
        self.push("add_tiled", out, Op::AddTiled(x, y))
    }

    /// Splits the rows of `x` into `g` equal blocks, where `g` is the row count of
    /// `y`, and adds row `i` of `y` to every row of block `i`.
    pub fn add_grouped(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let (xr, xc) = dims2(xv);
        let (g, yc) = dims2(yv);
        if xc != yc || xr % g != 0 {
            return Err(Error::shape("add_grouped", format!("{:?} + groups {:?}", xv.shape(), yv.shape())));
        }
        let block = (xr / g) * xc;
        let mut out = xv.clone();
        for (gi, chunk) in out.data_mut().chunks_mut(block).enumerate() {
            let row = &yv.data()[gi * yc..(gi + 1) * yc];
            for r in chunk.chunks_mut(xc) {
                for (o, &b) in r.iter_mut().zip(row) {
                    *o += b;
                }
            }
        }
        self.push("add_grouped", out, Op::AddGrouped(x, y))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push("scale", out, Op::Scale(x, c))
    }

    /// `a * x + b`, elementwise.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Result<Var> {
        let out = self.value(x).map(|v| a * v + b);
        self.push("affine", out, Op::Scale(x, a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", format!("row width {d}, gain {}, bias {}", gv.len(), bv.len())));
        }
        let rows = xv.outer_len();
        let mut xhat = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        let mut out = xv.clone();
        for (row, orow) in xhat.chunks_mut(d).zip(out.data_mut().chunks_mut(d)) {
            let st = row_stats(row, eps);
            rstd.push(st.rstd);
            for j in 0..d {
                row[j] = (row[j] - st.mean) * st.rstd;
                orow[j] = row[j] * gv.data()[j] + bv.data()[j];
            }
        }
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax();
        self.push("softmax", out, Op::Softmax(x))
    }

    /// Scaled dot-product attention for `batch` independent sequences.
    ///
    /// `q` is `[batch*lq, width]`, `k` and `v` are `[batch*lk, width]`; each row
    /// block is one sequence and `width` is split into `heads` equal slices.
    /// Returns the concatenated per-head outputs, `[batch*lq, width]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qr, width) = dims2(qv);
        let (kr, kw) = dims2(kv);
        let (vr, vw) = dims2(vv);
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape("attention", format!("width {width} not divisible by {heads} heads")));
        }
        if kw != width || vw != width || kr != vr || batch == 0 || qr % batch != 0 || kr % batch != 0 {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, batch {batch}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let dims = AttnDims { batch, heads, lq: qr / batch, lk: kr / batch, width };
        let dh = dims.head_dim();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut probs = vec![T::zero(); batch * heads * dims.lq * dims.lk];
        let mut out = vec![T::zero(); qr * width];
        let plen = dims.lq * dims.lk;
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * plen..(b * heads + h + 1) * plen];
                let qh = head_view(qv.data(), b * dims.lq, h * dh, dims.lq, dh, width);
                let kh = head_view(kv.data(), b * dims.lk, h * dh, dims.lk, dh, width);
                gemm(scale, qh, kh.t(), T::zero(), MatMut::dense(p, dims.lq, dims.lk));
                for row in p.chunks_mut(dims.lk) {
                    softmax_in_place(row);
                }
                let vh = head_view(vv.data(), b * dims.lk, h * dh, dims.lk, dh, width);
                gemm(
                    T::one(),
                    MatRef::dense(p, dims.lq, dims.lk),
                    vh,
                    T::zero(),
                    head_view_mut(&mut out, b * dims.lq, h * dh, dims.lq, dh, width),
                );
            }
        }
        let out = Tensor::new([qr, width], out)?;
        self.push("attention", out, Op::Attention { q, k, v, dims, probs })
    }

    /// Means over `groups` equal consecutive row blocks: `[groups*n, c] -> [groups, c]`.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2(xv);
        if groups == 0 || r % groups != 0 {
            return Err(Error::shape("mean_groups", format!("{r} rows into {groups} groups")));
        }
        let n = r / groups;
        let inv = T::one() / T::from_usize_lossy(n);
        let mut out = vec![T::zero(); groups * c];
        for (g, block) in xv.data().chunks(n * c).enumerate() {
            let o = &mut out[g * c..(g + 1) * c];
            for row in block.chunks(c) {
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let out = Tensor::new([groups, c], out)?;
        self.push("mean_groups", out, Op::MeanGroups(x, groups))
    }

    /// Generic element gather: output element `i` is element `index[i].1` of
    /// `sources[index[i].0]`. Expresses reshape, transpose, concatenation,
    /// upsampling and patchification.
    pub fn gather(&mut self, sources: &[Var], index: Vec<(u32, u32)>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let mut data = Vec::with_capacity(index.len());
        for &(s, i) in &index {
            let src = sources.get(s as usize).ok_or_else(|| Error::shape("gather", format!("source {s} out of range")))?;
            let v = self
                .value(*src)
                .data()
                .get(i as usize)
                .ok_or_else(|| Error::shape("gather", format!("element {i} out of range")))?;
            data.push(*v);
        }
        let out = Tensor::new(shape, data)?;
        self.push("gather", out, Op::Gather { sources: sources.to_vec(), index })
    }

    /// Row-wise cosine similarity of two `[n, d]` matrices, clamped to `[-1, 1]`.
    /// Returns `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("cosine_rows", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let (n, d) = dims2(av);
        let mut cos = Vec::with_capacity(n);
        let mut na = Vec::with_capacity(n);
        let mut nb = Vec::with_capacity(n);
        for (ra, rb) in av.data().chunks(d).zip(bv.data().chunks(d)) {
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let a_norm = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let b_norm = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            if a_norm == T::zero() || b_norm == T::zero() {
                return Err(Error::ZeroNorm);
            }
            cos.push((dot / (a_norm * b_norm)).max(-T::one()).min(T::one()));
            na.push(a_norm);
            nb.push(b_norm);
        }
        let out = Tensor::new([n], cos.clone())?;
        self.push("cosine_rows", out, Op::CosineRows { a, b, cos, na, nb })
    }

    /// Elementwise clamp; the gradient is passed only where `lo < x < hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push("clamp", out, Op::Clamp { x, lo, hi })
    }

    /// Elementwise binary cross-entropy `-(y ln p + (1-y) ln(1-p))`.
    /// `p` must already be clamped away from 0 and 1.
    pub fn bce(&mut self, p: Var, labels: &[T]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(Error::shape("bce", format!("{} predictions, {} labels", pv.len(), labels.len())));
        }
        let data = pv.data().iter().zip(labels).map(|(&p, &y)| -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())).collect();
        let out = Tensor::new(pv.shape().to_vec(), data)?;
        self.push("bce", out, Op::Bce { p, labels: labels.to_vec() })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.data().iter().copied().sum::<T>() / T::from_usize_lossy(xv.len());
        let out = Tensor::new([1], vec![m])?;
        self.push("mean", out, Op::Mean(x))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(av);
                let n = bv.last_dim();
                let gm = MatRef::dense(g, m, n);
                let ga = accumulate(&mut grads[a.0], m * k);
                gemm(T::one(), gm, MatRef::dense(bv.data(), k, n).t(), T::one(), MatMut::dense(ga, m, k));
                let gb = accumulate(&mut grads[b.0], k * n);
                gemm(T::one(), MatRef::dense(av.data(), m, k).t(), gm, T::one(), MatMut::dense(gb, k, n));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let acc = accumulate(&mut grads[v.0], g.len());
                    for (o, &d) in acc.iter_mut().zip(g) {
                        *o += d;
                    }
                }
            }
            Op::AddTiled(x, y) => {
                let acc = accumulate(&mut grads[x.0], g.len());
                for (o, &d) in acc.iter_mut().zip(g) {
                    *o += d;
                }
                let ylen = self.value(*y).len();
                let acc = accumulate(&mut grads[y.0], ylen);
                for block in g.chunks(ylen) {
                    for (o, &d) in acc.iter_mut().zip(block) {
                        *o += d;
                    }
                }
            }
            Op::AddGrouped(x, y) => {
                let acc = accumulate(&mut grads[x.0], g.len());
                for (o, &d) in acc.iter_mut().zip(g) {
                    *o += d;
                }
                let (groups, c) = dims2(self.value(*y));
                let block = g.len() / groups;
                let acc = accumulate(&mut grads[y.0], groups * c);
                for (gi, chunk) in g.chunks(block).enumerate() {
                    let row = &mut acc[gi * c..(gi + 1) * c];
                    for r in chunk.chunks(c) {
                        for (o, &d) in row.iter_mut().zip(r) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                let acc = accumulate(&mut grads[x.0], g.len());
                for (o, &d) in acc.iter_mut().zip(g) {
                    *o += *c * d;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let n = T::from_usize_lossy(d);
                {
                    let gg = accumulate(&mut grads[gain.0], d);
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                }
                {
                    let gb = accumulate(&mut grads[bias.0], d);
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                }
                let gx = accumulate(&mut grads[x.0], g.len());
                let mut dxhat = vec![T::zero(); d];
                for ((grow, xrow), (gxrow, &rs)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d).zip(rstd)) {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..d {
                        dxhat[j] = grow[j] * gv.data()[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xrow[j];
                    }
                    for j in 0..d {
                        gxrow[j] += rs * (dxhat[j] - sum_d / n - xrow[j] * sum_dx / n);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let acc = accumulate(&mut grads[x.0], g.len());
                for ((o, &d), &xi) in acc.iter_mut().zip(g).zip(xv.data()) {
                    *o += d * gelu_grad(xi);
                }
            }
            Op::Sigmoid(x) => {
                let acc = accumulate(&mut grads[x.0], g.len());
                for ((o, &d), &s) in acc.iter_mut().zip(g).zip(out.data()) {
                    *o += d * s * (T::one() - s);
                }
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let acc = accumulate(&mut grads[x.0], g.len());
                for ((orow, grow), srow) in acc.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                    let dot: T = grow.iter().zip(srow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        orow[j] += srow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::Attention { q, k, v, dims, probs } => self.backward_attention(*q, *k, *v, *dims, probs, g, grads),
            Op::MeanGroups(x, groups) => {
                let (r, c) = dims2(self.value(*x));
                let n = r / groups;
                let inv = T::one() / T::from_usize_lossy(n);
                let acc = accumulate(&mut grads[x.0], r * c);
                for (gi, block) in acc.chunks_mut(n * c).enumerate() {
                    let grow = &g[gi * c..(gi + 1) * c];
                    for row in block.chunks_mut(c) {
                        for (o, &d) in row.iter_mut().zip(grow) {
                            *o += d * inv;
                        }
                    }
                }
            }
            Op::Gather { sources, index } => {
                for (si, src) in sources.iter().enumerate() {
                    let len = self.value(*src).len();
                    accumulate(&mut grads[src.0], len);
                    let acc = grads[src.0].as_mut().expect("just initialized");
                    for (&(s, i), &d) in index.iter().zip(g) {
                        if s as usize == si {
                            acc[i as usize] += d;
                        }
                    }
                }
            }
            Op::CosineRows { a, b, cos, na, nb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.last_dim();
                let n = cos.len();
                let mut ga = vec![T::zero(); n * d];
                let mut gb = vec![T::zero(); n * d];
                for r in 0..n {
                    let (ra, rb) = (&av.data()[r * d..(r + 1) * d], &bv.data()[r * d..(r + 1) * d]);
                    let inv = T::one() / (na[r] * nb[r]);
                    let (ca, cb) = (cos[r] / (na[r] * na[r]), cos[r] / (nb[r] * nb[r]));
                    for j in 0..d {
                        ga[r * d + j] = g[r] * (rb[j] * inv - ca * ra[j]);
                        gb[r * d + j] = g[r] * (ra[j] * inv - cb * rb[j]);
                    }
                }
                for (var, local) in [(a, ga), (b, gb)] {
                    let acc = accumulate(&mut grads[var.0], n * d);
                    for (o, v) in acc.iter_mut().zip(local) {
                        *o += v;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let acc = accumulate(&mut grads[x.0], g.len());
                for ((o, &d), &xi) in acc.iter_mut().zip(g).zip(xv.data()) {
                    if xi > *lo && xi < *hi {
                        *o += d;
                    }
                }
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let acc = accumulate(&mut grads[p.0], g.len());
                for (((o, &d), &pi), &y) in acc.iter_mut().zip(g).zip(pv.data()).zip(labels) {
                    *o += d * (-y / pi + (T::one() - y) / (T::one() - pi));
                }
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let share = g[0] / T::from_usize_lossy(len);
                let acc = accumulate(&mut grads[x.0], len);
                for o in acc.iter_mut() {
                    *o += share;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(&self, q: Var, k: Var, v: Var, dims: AttnDims, probs: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttnDims { batch, heads, lq, lk, width } = dims;
        let dh = dims.head_dim();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut gq = vec![T::zero(); qv.len()];
        let mut gk = vec![T::zero(); kv.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let plen = lq * lk;
        let mut dp = vec![T::zero(); plen];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * plen..(b * heads + h + 1) * plen];
                let pm = MatRef::dense(p, lq, lk);
                let go = head_view(g, b * lq, h * dh, lq, dh, width);
                // dV = P^T dO
                gemm(T::one(), pm.t(), go, T::one(), head_view_mut(&mut gv, b * lk, h * dh, lk, dh, width));
                // dP = dO V^T
                let vh = head_view(vv.data(), b * lk, h * dh, lk, dh, width);
                gemm(T::one(), go, vh.t(), T::zero(), MatMut::dense(&mut dp, lq, lk));
                // dS = P * (dP - rowsum(dP * P))
                for (drow, prow) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                let ds = MatRef::dense(&dp, lq, lk);
                let kh = head_view(kv.data(), b * lk, h * dh, lk, dh, width);
                gemm(scale, ds, kh, T::one(), head_view_mut(&mut gq, b * lq, h * dh, lq, dh, width));
                let qh = head_view(qv.data(), b * lq, h * dh, lq, dh, width);
                gemm(scale, ds.t(), qh, T::one(), head_view_mut(&mut gk, b * lk, h * dh, lk, dh, width));
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            let acc = accumulate(&mut grads[var.0], local.len());
            for (o, x) in acc.iter_mut().zip(local) {
                *o += x;
            }
        }
    }
}

fn head_view<T>(data: &[T], row0: usize, col0: usize, rows: usize, cols: usize, width: usize) -> MatRef<'_, T> {
    MatRef { data, offset: row0 * width + col0, rows, cols, row_stride: width, col_stride: 1 }
}

fn head_view_mut<T>(data: &mut [T], row0: usize, col0: usize, rows: usize, cols: usize, width: usize) -> MatMut<'_, T> {
    MatMut { data, offset: row0 * width + col0, rows, cols, row_stride: width, col_stride: 1 }
}
