//! Parameter storage and the differentiable layers built on the tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Role of a parameter tensor. LARS skips the trust ratio for biases and norms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    pub fn uses_trust_ratio(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Places every parameter on the tape as a leaf; index the result with [`ParamId`].
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn gradients(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Vec<T>> {
        self.params.iter().zip(&bound.0).map(|(p, &v)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.value.len()])).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast() }).collect(),
        }
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Format(format!("expected {} parameter tensors, found {}", self.params.len(), other.len())));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(other) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter {:?} {:?} does not match {:?} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps externally created leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.uniform(-bound, bound)))
}

/// `y = x W + b` with `W: [input, output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Fan-in uniform initialization for both weight and bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, uniform_tensor(&[input, output], bound, rng));
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, uniform_tensor(&[output], bound, rng));
        Self { weight, bias, input, output }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_tiled(y, p.var(self.bias))
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), ParamKind::Norm, Tensor::filled([dim], T::one()));
        let bias = store.add(format!("{name}.bias"), ParamKind::Norm, Tensor::zeros([dim]));
        Self { gain, bias, dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), T::from_f64_lossy(LAYER_NORM_EPS))
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }
}

/// Multi-head attention with learned input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// `width` is the query/output width; keys and values are read from
    /// `kv_width`-wide rows.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng),
            key: Linear::new(store, &format!("{name}.k"), kv_width, width, rng),
            value: Linear::new(store, &format!("{name}.v"), kv_width, width, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
        })
    }

    /// `query: [batch*lq, width]`, `kv: [batch*lk, kv_width]` -> `[batch*lq, width]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, query: Var, kv: Var, batch: usize) -> Result<Var> {
        let q = self.query.forward(tape, p, query)?;
        let k = self.key.forward(tape, p, kv)?;
        let v = self.value.forward(tape, p, kv)?;
        let a = tape.attention(q, k, v, batch, self.heads)?;
        self.out.forward(tape, p, a)
    }

    pub fn param_count(width: usize, kv_width: usize) -> usize {
        2 * Linear::param_count(width, width) + 2 * Linear::param_count(kv_width, width)
    }
}

/// Two-layer GELU feed-forward network, hidden width `4 * width`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub const EXPANSION: usize = 4;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut SeededRng) -> Self {
        let hidden = Self::EXPANSION * width;
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, p, h)
    }

    pub fn param_count(width: usize) -> usize {
        let hidden = Self::EXPANSION * width;
        Linear::param_count(width, hidden) + Linear::param_count(hidden, width)
    }
}

/// Pre-norm transformer block:
/// `x += Attn(LN(x), kv)` then `x += FF(LN(x))`.
///
/// For self-attention `kv` is the normalized input itself; for cross-attention it
/// is an external token sequence.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, kv_width, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, rng),
        })
    }

    pub fn forward_self<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, batch: usize) -> Result<Var> {
        let h = self.norm_attn.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h, batch)?;
        let x = tape.add(x, a)?;
        self.feed_forward(tape, p, x)
    }

    pub fn forward_cross<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, kv: Var, batch: usize) -> Result<Var> {
        let h = self.norm_attn.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, kv, batch)?;
        let x = tape.add(x, a)?;
        self.feed_forward(tape, p, x)
    }

    fn feed_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm_ff.forward(tape, p, x)?;
        let f = self.ff.forward(tape, p, h)?;
        tape.add(x, f)
    }

    pub fn param_count(width: usize, kv_width: usize) -> usize {
        2 * LayerNorm::param_count(width) + MultiHeadAttention::param_count(width, kv_width) + FeedForward::param_count(width)
    }
}

/// Plain multi-layer perceptron: `Linear -> LayerNorm -> GELU` between layers,
/// bare `Linear` at the end.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
}

impl Mlp {
    /// `widths = [input, hidden..., output]`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, widths: &[usize], rng: &mut SeededRng) -> Self {
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), pair[0], pair[1], rng));
            if i + 2 < widths.len() {
                norms.push(LayerNorm::new(store, &format!("{name}.{i}.norm"), pair[1]));
            }
        }
        Self { layers, norms }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if let Some(norm) = self.norms.get(i) {
                x = norm.forward(tape, p, x)?;
                x = tape.gelu(x)?;
            }
        }
        Ok(x)
    }

    pub fn param_count(widths: &[usize]) -> usize {
        let n = widths.len();
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::param_count(w[0], w[1]) + if i + 2 < n { LayerNorm::param_count(w[1]) } else { 0 })
            .sum()
    }
}
