//! Dual-encoder fusion network and its angular safety head.
//!
//! Internally every feature map is channel-last: a level of a batch of `B`
//! records is a `[B*H*W, C]` matrix, one row per spatial position.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::binio::{read_json_block, read_named_tensors, write_json_block, write_named_tensors, LeReader};
use crate::cache::{FeatureRecord, PyramidSpec};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, Mlp, MultiHeadAttention, ParamId, ParamKind, ParamStore, TransformerBlock};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{cosine_similarity, patch_index, upsample_index, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KGFPMDL1";
pub const CHECKPOINT_VERSION: u32 = 1;
const POS_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Cosine,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub common_channels: usize,
    pub patch_size: usize,
    /// Width of the patch tokens after the patch embedding.
    pub token_dim: usize,
    pub heads: usize,
    pub n_self_blocks: usize,
    pub n_cross_blocks: usize,
    pub embed_dim: usize,
    /// Hidden widths of the world-knowledge encoder between `d_wk` and `embed_dim`.
    pub wk_hidden: Vec<usize>,
    pub use_pre_fusion_attn: bool,
    pub use_post_self_attn: bool,
    pub use_post_cross_attn: bool,
    pub head_kind: HeadKind,
}

impl ArchConfig {
    /// Full-size configuration for the 640x640 pyramid and 768-d embeddings.
    pub fn full() -> Self {
        Self {
            common_channels: 64,
            patch_size: 4,
            token_dim: 64,
            heads: 8,
            n_self_blocks: 2,
            n_cross_blocks: 2,
            embed_dim: 64,
            wk_hidden: vec![1024, 768, 640, 512],
            use_pre_fusion_attn: true,
            use_post_self_attn: true,
            use_post_cross_attn: true,
            head_kind: HeadKind::Cosine,
        }
    }

    /// Scaled-down configuration matching [`PyramidSpec::desk`] and 32-d embeddings.
    pub fn desk() -> Self {
        Self {
            common_channels: 8,
            patch_size: 2,
            token_dim: 16,
            heads: 4,
            n_self_blocks: 2,
            n_cross_blocks: 2,
            embed_dim: 64,
            wk_hidden: vec![64, 48, 40, 32],
            use_pre_fusion_attn: true,
            use_post_self_attn: true,
            use_post_cross_attn: true,
            head_kind: HeadKind::Cosine,
        }
    }

    /// Same network with every attention stage switched off.
    pub fn without_attention(mut self) -> Self {
        self.use_pre_fusion_attn = false;
        self.use_post_self_attn = false;
        self.use_post_cross_attn = false;
        self
    }

    pub fn validate(&self, spec: &PyramidSpec) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.common_channels == 0 || self.token_dim == 0 || self.heads == 0 || self.patch_size == 0 {
            return bad("architecture extents must be positive".into());
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim {} must be at least 2", self.embed_dim));
        }
        if !self.common_channels.is_multiple_of(self.heads) {
            return bad(format!("common_channels {} not divisible by {} heads", self.common_channels, self.heads));
        }
        if !self.token_dim.is_multiple_of(self.heads) {
            return bad(format!("token_dim {} not divisible by {} heads", self.token_dim, self.heads));
        }
        if self.wk_hidden.contains(&0) {
            return bad("wk_hidden widths must be positive".into());
        }
        spec.validate()?;
        let f = spec.finest();
        if !f.height.is_multiple_of(self.patch_size) || !f.width.is_multiple_of(self.patch_size) {
            return bad(format!("patch size {} does not divide {}x{}", self.patch_size, f.height, f.width));
        }
        Ok(())
    }

    fn wk_widths(&self, d_wk: usize) -> Vec<usize> {
        let mut w = vec![d_wk];
        w.extend(&self.wk_hidden);
        w.push(self.embed_dim);
        w
    }

    fn tokens(&self, spec: &PyramidSpec) -> usize {
        let f = spec.finest();
        (f.height / self.patch_size) * (f.width / self.patch_size)
    }
}

/// Closed-form parameter count for `arch` on `spec`.
pub fn parameter_count(arch: &ArchConfig, spec: &PyramidSpec, d_wk: usize) -> usize {
    let cc = arch.common_channels;
    let td = arch.token_dim;
    let mut n: usize = spec.levels.iter().map(|l| Linear::param_count(l.channels, cc)).sum();
    if arch.use_pre_fusion_attn {
        n += MultiHeadAttention::param_count(cc, cc);
    }
    n += Linear::param_count(cc * arch.patch_size * arch.patch_size, td);
    n += arch.tokens(spec) * td;
    if arch.use_post_self_attn {
        n += arch.n_self_blocks * TransformerBlock::param_count(td, td);
    }
    if arch.use_post_cross_attn && arch.n_cross_blocks > 0 {
        n += Linear::param_count(d_wk, td) + arch.n_cross_blocks * TransformerBlock::param_count(td, td);
    }
    n += Linear::param_count(td, arch.embed_dim);
    n += Mlp::param_count(&arch.wk_widths(d_wk));
    if arch.head_kind == HeadKind::Mlp {
        n += Linear::param_count(2 * arch.embed_dim, arch.embed_dim) + Linear::param_count(arch.embed_dim, 1);
    }
    n
}

/// `p_unsafe = (1 - s) / 2`: aligned embeddings are safe, opposed ones unsafe.
pub fn score_to_probability<T: Scalar>(s: T) -> T {
    let half = T::from_f64_lossy(0.5);
    (T::one() - s) * half
}

/// Nearest-upsamples every `[C,H,W]` level to the first level's resolution and sums.
pub fn fuse<T: Scalar>(levels: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = levels.first().ok_or_else(|| Error::shape("fuse", "no levels"))?;
    let (h, w) = match first.shape() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::shape("fuse", format!("expected [C,H,W], got {s:?}"))),
    };
    let mut out = first.clone();
    for l in &levels[1..] {
        out = out.add(&l.nearest_upsample((h, w))?)?;
    }
    Ok(out)
}

/// `[C,H,W]` to `[H*W, C]`.
pub fn to_channel_last<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = *t.shape() else {
        return Err(Error::shape("to_channel_last", format!("expected [C,H,W], got {:?}", t.shape())));
    };
    let hw = h * w;
    Tensor::new([hw, c], (0..hw * c).map(|i| t.data()[(i % c) * hw + i / c]).collect())
}

/// `[H*W, C]` to `[C,H,W]`.
pub fn to_channel_first<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = t.last_dim();
    if t.outer_len() != h * w {
        return Err(Error::shape("to_channel_first", format!("{:?} is not {h}x{w} positions", t.shape())));
    }
    let hw = h * w;
    Tensor::new([c, h, w], (0..hw * c).map(|i| t.data()[(i % hw) * c + i / hw]).collect())
}

#[derive(Clone, Debug)]
struct Layers {
    proj: Vec<Linear>,
    pre_attn: Option<MultiHeadAttention>,
    patch_embed: Linear,
    pos: ParamId,
    self_blocks: Vec<TransformerBlock>,
    wk_token: Option<Linear>,
    cross_blocks: Vec<TransformerBlock>,
    e_pr: Linear,
    e_wk: Mlp,
    head: Option<(Linear, Linear)>,
}

/// Tape handles of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub e_pr: Var,
    pub e_wk: Var,
    /// Safety score in `[-1, 1]`, `[B]` or `[B,1]`.
    pub score: Var,
    /// Probability of the unsafe class.
    pub p_unsafe: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub e_pr: Tensor<T>,
    pub e_wk: Tensor<T>,
    pub s_safety: T,
    pub p_unsafe: T,
}

#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    pub arch: ArchConfig,
    pub spec: PyramidSpec,
    pub d_wk: usize,
    pub params: ParamStore<T>,
    layers: Layers,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchConfig,
    spec: PyramidSpec,
    d_wk: usize,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(arch: ArchConfig, spec: PyramidSpec, d_wk: usize, seed: u64) -> Result<Self> {
        arch.validate(&spec)?;
        if d_wk == 0 {
            return Err(Error::InvalidArgument("d_wk must be positive".into()));
        }
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let cc = arch.common_channels;
        let td = arch.token_dim;
        let proj =
            spec.levels.iter().map(|l| Linear::new(&mut store, &format!("proj.{}", l.name), l.channels, cc, &mut rng)).collect();
        let pre_attn = if arch.use_pre_fusion_attn {
            Some(MultiHeadAttention::new(&mut store, "pre_fusion", cc, cc, arch.heads, &mut rng)?)
        } else {
            None
        };
        let patch_embed = Linear::new(&mut store, "patch_embed", cc * arch.patch_size * arch.patch_size, td, &mut rng);
        let pos_init = Tensor::from_fn([arch.tokens(&spec), td], |_| T::from_f64_lossy(rng.normal() * POS_INIT_STD));
        let pos = store.add("pos_embed", ParamKind::Embedding, pos_init);
        let mut self_blocks = Vec::new();
        if arch.use_post_self_attn {
            for i in 0..arch.n_self_blocks {
                self_blocks.push(TransformerBlock::new(&mut store, &format!("self.{i}"), td, td, arch.heads, &mut rng)?);
            }
        }
        let mut cross_blocks = Vec::new();
        let mut wk_token = None;
        if arch.use_post_cross_attn && arch.n_cross_blocks > 0 {
            wk_token = Some(Linear::new(&mut store, "wk_token", d_wk, td, &mut rng));
            for i in 0..arch.n_cross_blocks {
                cross_blocks.push(TransformerBlock::new(&mut store, &format!("cross.{i}"), td, td, arch.heads, &mut rng)?);
            }
        }
        let e_pr = Linear::new(&mut store, "e_pr", td, arch.embed_dim, &mut rng);
        let e_wk = Mlp::new(&mut store, "e_wk", &arch.wk_widths(d_wk), &mut rng);
        let head = match arch.head_kind {
            HeadKind::Cosine => None,
            HeadKind::Mlp => Some((
                Linear::new(&mut store, "head.0", 2 * arch.embed_dim, arch.embed_dim, &mut rng),
                Linear::new(&mut store, "head.1", arch.embed_dim, 1, &mut rng),
            )),
        };
        let layers = Layers { proj, pre_attn, patch_embed, pos, self_blocks, wk_token, cross_blocks, e_pr, e_wk, head };
        Ok(Self { arch, spec, d_wk, params: store, layers })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> FusionModel<U> {
        FusionModel {
            arch: self.arch.clone(),
            spec: self.spec.clone(),
            d_wk: self.d_wk,
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Stacks records into channel-last level matrices and a `[B, d_wk]` embedding matrix.
    pub fn batch_inputs(&self, records: &[&FeatureRecord]) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = records.len();
        let mut levels = Vec::with_capacity(self.spec.levels.len());
        for r in records {
            r.check_shapes(&self.spec, self.d_wk)?;
        }
        for (li, l) in self.spec.levels.iter().enumerate() {
            let hw = l.height * l.width;
            let mut data = Vec::with_capacity(b * l.len());
            for r in records {
                let src = r.pyramid[li].data();
                for pos in 0..hw {
                    data.extend((0..l.channels).map(|c| T::from_f64_lossy(src[c * hw + pos] as f64)));
                }
            }
            levels.push(Tensor::new([b * hw, l.channels], data)?);
        }
        let wk = records.iter().flat_map(|r| r.wk.data().iter().map(|&v| T::from_f64_lossy(v as f64))).collect();
        Ok((levels, Tensor::new([b, self.d_wk], wk)?))
    }

    /// Records the full network for a batch whose inputs are already leaves on `tape`.
    pub fn forward_vars(&self, tape: &mut Tape<T>, p: &Bound, levels: &[Var], wk: Var, batch: usize) -> Result<BatchVars> {
        let ly = &self.layers;
        if levels.len() != ly.proj.len() {
            return Err(Error::shape("forward", format!("{} levels, model has {}", levels.len(), ly.proj.len())));
        }
        let mut xs = Vec::with_capacity(levels.len());
        for (lin, &x) in ly.proj.iter().zip(levels) {
            xs.push(lin.forward(tape, p, x)?);
        }
        if let Some(attn) = &ly.pre_attn {
            xs = self.pre_fusion_vars(tape, p, attn, xs, batch)?;
        }
        let fused = self.fuse_vars(tape, &xs, batch)?;
        let tokens = self.patchify_vars(tape, fused, batch)?;
        let mut x = ly.patch_embed.forward(tape, p, tokens)?;
        x = tape.add_tiled(x, p.var(ly.pos))?;
        for blk in &ly.self_blocks {
            x = blk.forward_self(tape, p, x, batch)?;
        }
        if let Some(wk_token) = &ly.wk_token {
            let kv = wk_token.forward(tape, p, wk)?;
            for blk in &ly.cross_blocks {
                x = blk.forward_cross(tape, p, x, kv, batch)?;
            }
        }
        let pooled = tape.mean_groups(x, batch)?;
        let e_pr = ly.e_pr.forward(tape, p, pooled)?;
        let e_wk = ly.e_wk.forward(tape, p, wk)?;
        let (score, p_unsafe) = self.head_vars(tape, p, e_pr, e_wk)?;
        Ok(BatchVars { e_pr, e_wk, score, p_unsafe })
    }

    fn head_vars(&self, tape: &mut Tape<T>, p: &Bound, e_pr: Var, e_wk: Var) -> Result<(Var, Var)> {
        let half = T::from_f64_lossy(0.5);
        match &self.layers.head {
            None => {
                let s = tape.cosine_rows(e_pr, e_wk)?;
                let prob = tape.affine(s, -half, half)?;
                Ok((s, prob))
            }
            Some((hidden, out)) => {
                let b = tape.value(e_pr).outer_len();
                let d = self.arch.embed_dim;
                let index = (0..b)
                    .flat_map(|r| {
                        (0..2 * d).map(move |j| if j < d { (0, (r * d + j) as u32) } else { (1, (r * d + j - d) as u32) })
                    })
                    .collect();
                let cat = tape.gather(&[e_pr, e_wk], index, [b, 2 * d])?;
                let h = hidden.forward(tape, p, cat)?;
                let h = tape.gelu(h)?;
                let z = out.forward(tape, p, h)?;
                let prob = tape.sigmoid(z)?;
                let two = T::from_f64_lossy(2.0);
                let s = tape.affine(prob, -two, T::one())?;
                Ok((s, prob))
            }
        }
    }

    fn pre_fusion_vars(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        attn: &MultiHeadAttention,
        mut xs: Vec<Var>,
        batch: usize,
    ) -> Result<Vec<Var>> {
        let cc = self.arch.common_channels;
        let n = xs.len();
        let tokens = xs.iter().map(|&x| tape.mean_groups(x, batch)).collect::<Result<Vec<_>>>()?;
        let index =
            (0..batch).flat_map(|b| (0..n).flat_map(move |l| (0..cc).map(move |c| (l as u32, (b * cc + c) as u32)))).collect();
        let stacked = tape.gather(&tokens, index, [batch * n, cc])?;
        let out = attn.forward(tape, p, stacked, stacked, batch)?;
        for (l, x) in xs.iter_mut().enumerate() {
            let index = (0..batch).flat_map(|b| (0..cc).map(move |c| (0, ((b * n + l) * cc + c) as u32))).collect();
            let y = tape.gather(&[out], index, [batch, cc])?;
            *x = tape.add_grouped(*x, y)?;
        }
        Ok(xs)
    }

    fn fuse_vars(&self, tape: &mut Tape<T>, xs: &[Var], batch: usize) -> Result<Var> {
        let cc = self.arch.common_channels;
        let f = self.spec.finest();
        let hw0 = f.height * f.width;
        let mut acc = xs[0];
        for (l, &x) in self.spec.levels.iter().zip(xs).skip(1) {
            let hw = l.height * l.width;
            let up = upsample_index(l.height, l.width, f.height, f.width);
            let index = (0..batch)
                .flat_map(|b| up.iter().flat_map(move |&src| (0..cc).map(move |c| (0, ((b * hw + src) * cc + c) as u32))))
                .collect();
            let g = tape.gather(&[x], index, [batch * hw0, cc])?;
            acc = tape.add(acc, g)?;
        }
        Ok(acc)
    }

    fn patchify_vars(&self, tape: &mut Tape<T>, fused: Var, batch: usize) -> Result<Var> {
        let cc = self.arch.common_channels;
        let ps = self.arch.patch_size;
        let f = self.spec.finest();
        let (h, w) = (f.height, f.width);
        let mut index = Vec::with_capacity(batch * h * w * cc);
        for b in 0..batch {
            let idx = patch_index(cc, h, w, ps, |c, y, x| (b * h * w + y * w + x) * cc + c)?;
            index.extend(idx.into_iter().map(|i| (0, i as u32)));
        }
        tape.gather(&[fused], index, [batch * self.arch.tokens(&self.spec), cc * ps * ps])
    }

    /// Forward pass for a batch of records with fresh parameter leaves.
    pub fn forward_batch(&self, tape: &mut Tape<T>, records: &[&FeatureRecord]) -> Result<(Bound, BatchVars)> {
        let (levels, wk) = self.batch_inputs(records)?;
        let p = self.params.bind(tape);
        let levels: Vec<Var> = levels.into_iter().map(|t| tape.leaf(t)).collect();
        let wk = tape.leaf(wk);
        let out = self.forward_vars(tape, &p, &levels, wk, records.len())?;
        Ok((p, out))
    }

    pub fn forward(&self, record: &FeatureRecord) -> Result<Prediction<T>> {
        Ok(self.predict(std::slice::from_ref(record), 1)?.remove(0))
    }

    /// Inference over many records in chunks of `batch`.
    pub fn predict(&self, records: &[FeatureRecord], batch: usize) -> Result<Vec<Prediction<T>>> {
        let batch = batch.max(1);
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(batch) {
            let refs: Vec<&FeatureRecord> = chunk.iter().collect();
            let mut tape = Tape::new().with_finite_check(true);
            let (_, v) = self.forward_batch(&mut tape, &refs)?;
            let d = self.arch.embed_dim;
            let (e_pr, e_wk) = (tape.value(v.e_pr).data(), tape.value(v.e_wk).data());
            let (s, pu) = (tape.value(v.score).data(), tape.value(v.p_unsafe).data());
            for i in 0..chunk.len() {
                out.push(Prediction {
                    e_pr: Tensor::vector(e_pr[i * d..(i + 1) * d].to_vec()),
                    e_wk: Tensor::vector(e_wk[i * d..(i + 1) * d].to_vec()),
                    s_safety: s[i],
                    p_unsafe: pu[i],
                });
            }
        }
        Ok(out)
    }

    /// Safety score from a pair of embeddings, through whichever head the model uses.
    pub fn head_score(&self, e_pr: &Tensor<T>, e_wk: &Tensor<T>) -> Result<T> {
        if self.layers.head.is_none() {
            return cosine_similarity(e_pr, e_wk);
        }
        let d = self.arch.embed_dim;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let a = tape.leaf(e_pr.clone().reshape([1, d])?);
        let b = tape.leaf(e_wk.clone().reshape([1, d])?);
        let (s, _) = self.head_vars(&mut tape, &p, a, b)?;
        Ok(tape.value(s).data()[0])
    }

    /// Runs the pre-fusion stage on already projected `[C,H,W]` levels.
    pub fn pre_fusion_attention(&self, pyramid: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let Some(attn) = &self.layers.pre_attn else {
            return Ok(pyramid.to_vec());
        };
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let mut xs = Vec::new();
        for t in pyramid {
            if t.rank() != 3 || t.shape()[0] != self.arch.common_channels {
                return Err(Error::shape("pre_fusion_attention", format!("level {:?}", t.shape())));
            }
            xs.push(tape.leaf(to_channel_last(t)?));
        }
        let out = self.pre_fusion_vars(&mut tape, &p, attn, xs, 1)?;
        out.iter().zip(pyramid).map(|(&v, t)| to_channel_first(tape.value(v), t.shape()[1], t.shape()[2])).collect()
    }

    pub fn save_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = CheckpointHeader { arch: self.arch.clone(), spec: self.spec.clone(), d_wk: self.d_wk };
        write_json_block(w, &header)?;
        let named: Vec<(&str, &Tensor<T>)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        write_named_tensors(w, &named)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_from<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
        }
        let header: CheckpointHeader = read_json_block(&mut r, "header")?;
        let mut model = Self::new(header.arch, header.spec, header.d_wk, 0)?;
        let tensors = read_named_tensors(&mut r)?;
        model.params.load_from(&tensors)?;
        if !r.at_end()? {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::synth::generate_synthetic;

    fn tiny_spec() -> PyramidSpec {
        PyramidSpec::from_dims(&[(2, 4, 4), (3, 2, 2)]).unwrap()
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            common_channels: 2,
            patch_size: 2,
            token_dim: 4,
            heads: 2,
            n_self_blocks: 1,
            n_cross_blocks: 1,
            embed_dim: 4,
            wk_hidden: vec![5],
            use_pre_fusion_attn: true,
            use_post_self_attn: true,
            use_post_cross_attn: true,
            head_kind: HeadKind::Cosine,
        }
    }

    fn tiny_records(n: usize) -> Vec<FeatureRecord> {
        let spec = tiny_spec();
        generate_synthetic(&spec, 3, n, 0.5, 0.3, 17).unwrap()
    }

    #[test]
    fn score_mapping() {
        assert_eq!(score_to_probability(1.0f64), 0.0);
        assert_eq!(score_to_probability(-1.0f64), 1.0);
        assert_eq!(score_to_probability(0.0f64), 0.5);
    }

    #[test]
    fn fuse_examples() {
        let a = Tensor::from_fn([2, 4, 4], |i| i as f64);
        let two = fuse(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(two, a.scale(2.0));
        let small = Tensor::from_fn([2, 2, 2], |i| i as f64 + 1.0);
        let out = fuse(&[Tensor::zeros([2, 4, 4]), small.clone()]).unwrap();
        assert_eq!(out, small.nearest_upsample((4, 4)).unwrap());
        assert_eq!(out.shape(), &[2, 4, 4]);
    }

    #[test]
    fn layout_roundtrip() {
        let t = Tensor::from_fn([3, 2, 4], |i| i as f64);
        let cl = to_channel_last(&t).unwrap();
        assert_eq!(cl.shape(), &[8, 3]);
        assert_eq!(cl.data()[..3], [0.0, 8.0, 16.0]);
        assert_eq!(to_channel_first(&cl, 2, 4).unwrap(), t);
    }

    #[test]
    fn pre_fusion_switch_and_single_level() {
        let spec = PyramidSpec::from_dims(&[(2, 4, 4)]).unwrap();
        let x = Tensor::from_fn([2, 4, 4], |i| (i as f64 * 0.3).sin());
        let off = FusionModel::<f64>::new(tiny_arch().without_attention(), spec.clone(), 3, 1).unwrap();
        assert_eq!(off.pre_fusion_attention(std::slice::from_ref(&x)).unwrap()[0], x);

        // One token attends only to itself, so the output is out(value(mean token)).
        let m = FusionModel::<f64>::new(tiny_arch(), spec, 3, 1).unwrap();
        let attn = m.layers.pre_attn.as_ref().unwrap();
        let token = x.mean_pool_spatial().unwrap().reshape([1, 2]).unwrap();
        let lin = |l: &Linear, t: &Tensor<f64>| {
            let w = &m.params.get(l.weight).value;
            let b = &m.params.get(l.bias).value;
            let y = t.matmul(w).unwrap();
            Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] + b.data()[i % b.len()])
        };
        let y = lin(&attn.out, &lin(&attn.value, &token));
        let expect = Tensor::from_fn([2, 4, 4], |i| x.data()[i] + y.data()[i / 16]);
        let got = &m.pre_fusion_attention(std::slice::from_ref(&x)).unwrap()[0];
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn network_gradient(arch: ArchConfig) -> f64 {
        let recs = tiny_records(2);
        let refs: Vec<&FeatureRecord> = recs.iter().collect();
        let m = FusionModel::<f64>::new(arch, tiny_spec(), 3, 5).unwrap();
        assert!(m.parameter_count() < 2000);
        let (levels, wk) = m.batch_inputs(&refs).unwrap();
        let labels: Vec<f64> = recs.iter().map(|r| r.label.as_f64()).collect();
        let n = m.params.len();
        let mut inputs: Vec<Tensor<f64>> = m.params.iter().map(|p| p.value.clone()).collect();
        inputs.extend(levels);
        inputs.push(wk);
        gradcheck::check(
            &inputs,
            |tape, vars| {
                let p = Bound::from_vars(vars[..n].to_vec());
                let out = m.forward_vars(tape, &p, &vars[n..vars.len() - 1], vars[vars.len() - 1], 2)?;
                let l = tape.bce(out.p_unsafe, &labels)?;
                tape.mean(l)
            },
            1e-3,
            1e-8,
        )
        .unwrap()
    }

    #[test]
    fn whole_network_gradient() {
        let worst = network_gradient(tiny_arch());
        assert!(worst <= 1.0, "worst ratio {worst}");
    }

    #[test]
    fn mlp_head_gradient_and_range() {
        let arch = ArchConfig { head_kind: HeadKind::Mlp, ..tiny_arch() };
        let worst = network_gradient(arch.clone());
        assert!(worst <= 1.0, "worst ratio {worst}");
        let m = FusionModel::<f64>::new(arch, tiny_spec(), 3, 5).unwrap();
        for r in tiny_records(10) {
            let a = m.forward(&r).unwrap();
            assert!(a.p_unsafe > 0.0 && a.p_unsafe < 1.0);
            assert_eq!(a, m.forward(&r).unwrap());
        }
    }

    #[test]
    fn cosine_head_is_scale_invariant() {
        let m = FusionModel::<f64>::new(tiny_arch(), tiny_spec(), 3, 5).unwrap();
        let a = m.forward(&tiny_records(1)[0]).unwrap();
        let s = m.head_score(&a.e_pr, &a.e_wk).unwrap();
        assert!((s - a.s_safety).abs() < 1e-12);
        for c in [1e-3, 0.5, 7.0, 1e4] {
            assert!((m.head_score(&a.e_pr.scale(c), &a.e_wk).unwrap() - s).abs() < 1e-12);
        }
        assert!((m.head_score(&a.e_wk, &a.e_wk).unwrap() - 1.0).abs() < 1e-12);
        assert!((score_to_probability(a.s_safety) - a.p_unsafe).abs() < 1e-15);
    }

    #[test]
    fn no_attention_matches_hand_composition() {
        let spec = PyramidSpec::desk();
        let m = FusionModel::<f64>::new(ArchConfig::desk().without_attention(), spec.clone(), 32, 3).unwrap();
        let rec = &generate_synthetic(&spec, 32, 1, 0.5, 0.5, 2).unwrap()[0];
        let got = m.forward(rec).unwrap();

        let w = |id: ParamId| &m.params.get(id).value;
        let lin = |l: &Linear, x: &Tensor<f64>| {
            let y = x.matmul(w(l.weight)).unwrap();
            let b = w(l.bias);
            Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] + b.data()[i % b.len()])
        };
        let projected: Vec<Tensor<f64>> = rec
            .pyramid
            .iter()
            .zip(&spec.levels)
            .zip(&m.layers.proj)
            .map(|((t, l), p)| {
                let cl = to_channel_last(&t.cast::<f64>()).unwrap();
                to_channel_first(&lin(p, &cl), l.height, l.width).unwrap()
            })
            .collect();
        let fused = fuse(&projected).unwrap();
        let tokens = lin(&m.layers.patch_embed, &fused.patchify(2).unwrap());
        let tokens = tokens.add(w(m.layers.pos)).unwrap();
        let n = tokens.outer_len() as f64;
        let pooled = Tensor::from_fn([1, tokens.last_dim()], |j| {
            (0..tokens.outer_len()).map(|t| tokens.data()[t * tokens.last_dim() + j]).sum::<f64>() / n
        });
        let e_pr = lin(&m.layers.e_pr, &pooled);
        for (a, b) in got.e_pr.data().iter().zip(e_pr.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fresh_model_scores_near_zero() {
        let spec = PyramidSpec::desk();
        let m = FusionModel::<f32>::new(ArchConfig::desk(), spec.clone(), 32, 11).unwrap();
        let recs = generate_synthetic(&spec, 32, 24, 0.3, 0.5, 12).unwrap();
        for p in m.predict(&recs, 6).unwrap() {
            assert!(p.s_safety.abs() < 0.5, "{}", p.s_safety);
        }
    }

    #[test]
    fn parameter_counts() {
        let m = FusionModel::<f32>::new(ArchConfig::desk(), PyramidSpec::desk(), 32, 0).unwrap();
        assert_eq!(m.parameter_count(), parameter_count(&ArchConfig::desk(), &PyramidSpec::desk(), 32));
        for arch in [tiny_arch().without_attention(), ArchConfig { head_kind: HeadKind::Mlp, ..tiny_arch() }] {
            let m = FusionModel::<f32>::new(arch.clone(), tiny_spec(), 3, 0).unwrap();
            assert_eq!(m.parameter_count(), parameter_count(&arch, &tiny_spec(), 3));
        }
        let full = parameter_count(&ArchConfig::full(), &PyramidSpec::full(), 768) as f64;
        assert!((full / 2.6e6 - 1.0).abs() <= 0.15, "{full}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = FusionModel::<f32>::new(tiny_arch(), tiny_spec(), 3, 9).unwrap();
        let mut buf = Vec::new();
        m.save_to(&mut buf).unwrap();
        let back = FusionModel::<f32>::load_from(buf.as_slice()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.arch, m.arch);
        let mut again = Vec::new();
        back.save_to(&mut again).unwrap();
        assert_eq!(buf, again);
        buf[0] = b'Z';
        assert!(matches!(FusionModel::<f32>::load_from(buf.as_slice()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_bad_arch() {
        let spec = tiny_spec();
        assert!(FusionModel::<f32>::new(ArchConfig { heads: 3, ..tiny_arch() }, spec.clone(), 3, 0).is_err());
        assert!(FusionModel::<f32>::new(ArchConfig { embed_dim: 1, ..tiny_arch() }, spec.clone(), 3, 0).is_err());
        assert!(FusionModel::<f32>::new(ArchConfig { patch_size: 3, ..tiny_arch() }, spec, 3, 0).is_err());
    }
}
