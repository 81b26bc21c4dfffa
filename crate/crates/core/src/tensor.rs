//! Dense row-major tensors and the forward-only numeric kernels.
//!
//! Differentiable versions of these kernels live in [`crate::autodiff`]; both
//! share the helpers defined here so the two paths cannot drift apart.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};

/// Dense row-major tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Rank-1 tensor. Panics on an empty vector.
    pub fn vector(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self { shape: vec![data.len()], data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect() })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::dense(&self.data, m, k),
            MatRef::dense(&other.data, k, n),
            T::zero(),
            MatMut::dense(&mut out, m, n),
        );
        Ok(Self { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self { shape: vec![n, m], data: out })
    }

    /// Normalizes every row of the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let d = self.last_dim();
        if gain.len() != d || bias.len() != d {
            return Err(Error::shape("layer_norm", format!("row width {d}, gain {}, bias {}", gain.len(), bias.len())));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let stats = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - stats.mean) * stats.rstd * gain.data[j] + bias.data[j];
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    /// Tanh-approximated GELU, elementwise.
    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Self {
        let d = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        Self { shape: self.shape.clone(), data: out }
    }

    /// Nearest-neighbour upsampling of a `[C,h,w]` map to `[C,H,W]`.
    pub fn nearest_upsample(&self, target: (usize, usize)) -> Result<Self> {
        let (c, h, w) = self.as_chw("nearest_upsample")?;
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::shape("nearest_upsample", "target extents must be positive"));
        }
        let index = upsample_index(h, w, th, tw);
        let mut data = Vec::with_capacity(c * th * tw);
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            data.extend(index.iter().map(|&i| plane[i]));
        }
        Ok(Self { shape: vec![c, th, tw], data })
    }

    /// Mean over the spatial axes of a `[C,H,W]` map.
    pub fn mean_pool_spatial(&self) -> Result<Self> {
        let (c, h, w) = self.as_chw("mean_pool_spatial")?;
        let hw = T::from_usize_lossy(h * w);
        let data = self.data.chunks(h * w).map(|p| p.iter().copied().sum::<T>() / hw).collect();
        debug_assert_eq!(c, self.data.len() / (h * w));
        Ok(Self { shape: vec![c], data })
    }

    /// Splits a `[C,H,W]` map into non-overlapping `p x p` patches.
    ///
    /// Output is `[(H/p)*(W/p), C*p*p]`; patches are in row-major order and the
    /// features inside a patch are ordered `(channel, dy, dx)`.
    pub fn patchify(&self, p: usize) -> Result<Self> {
        let (c, h, w) = self.as_chw("patchify")?;
        let index = patch_index(c, h, w, p, |ch, y, x| ch * h * w + y * w + x)?;
        let tokens = (h / p) * (w / p);
        Ok(Self { shape: vec![tokens, c * p * p], data: index.iter().map(|&i| self.data[i]).collect() })
    }

    /// Inverse of [`Tensor::patchify`].
    pub fn unpatchify(&self, channels: usize, height: usize, width: usize, p: usize) -> Result<Self> {
        let index = patch_index(channels, height, width, p, |ch, y, x| ch * height * width + y * width + x)?;
        if index.len() != self.data.len() {
            return Err(Error::shape("unpatchify", format!("{:?} vs [{channels},{height},{width}]", self.shape)));
        }
        let mut data = vec![T::zero(); index.len()];
        for (src, &dst) in index.iter().enumerate() {
            data[dst] = self.data[src];
        }
        Ok(Self { shape: vec![channels, height, width], data })
    }

    fn as_chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::shape(op, format!("expected [C,H,W], got {other:?}"))),
        }
    }
}

/// `a . b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let dot: T = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
    let na = a.norm();
    let nb = b.norm();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

pub(crate) struct RowStats<T> {
    pub mean: T,
    pub rstd: T,
}

pub(crate) fn row_stats<T: Scalar>(row: &[T], eps: T) -> RowStats<T> {
    let n = T::from_usize_lossy(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    RowStats { mean, rstd: T::one() / (var + eps).sqrt() }
}

const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu_k<T: Scalar>() -> T {
    T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt())
}

/// `(1 + tanh(z)) / 2` written as a logistic, which is much cheaper than `tanh`.
#[inline]
fn gelu_gate<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let z = gelu_k::<T>() * (x + c * x * x * x);
    T::one() / (T::one() + (-(z + z)).exp())
}

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let three = T::from_f64_lossy(3.0);
    let s = gelu_gate(x);
    s + (x + x) * s * (T::one() - s) * gelu_k::<T>() * (T::one() + three * c * x * x)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// For every output position of a `th x tw` grid, the flat index of its nearest
/// source position in an `h x w` grid.
pub(crate) fn upsample_index(h: usize, w: usize, th: usize, tw: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = (y * h / th).min(h - 1);
        for x in 0..tw {
            let sx = (x * w / tw).min(w - 1);
            out.push(sy * w + sx);
        }
    }
    out
}

/// Gather index for patchification: element `(token, feature)` of the output
/// reads `source(channel, y, x)`.
pub(crate) fn patch_index(
    channels: usize,
    height: usize,
    width: usize,
    p: usize,
    source: impl Fn(usize, usize, usize) -> usize,
) -> Result<Vec<usize>> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::shape("patchify", format!("spatial size {height}x{width} not divisible by patch size {p}")));
    }
    let (gh, gw) = (height / p, width / p);
    let mut out = Vec::with_capacity(channels * height * width);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..channels {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(source(c, py * p + dy, px * p + dx));
                    }
                }
            }
        }
    }
    Ok(out)
}
