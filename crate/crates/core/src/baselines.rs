//! Comparison scorers: GRAM, k-NN and ViM on pyramid features, plus ViM and an
//! MLP ensemble on the world-knowledge embedding. All scores are oriented so
//! that higher means safer.
//!
//! Cross-scale aggregation: GRAM sums deviations, k-NN averages distances,
//! ViM sums residual norms.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::binio::{read_json_block, write_json_block, LeReader};
use crate::cache::FeatureRecord;
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::trainer::{adam_update, loss_var};

pub const BASELINE_MAGIC: &[u8; 8] = b"KGFPBSL1";
pub const BASELINE_VERSION: u32 = 1;
pub const GRAM_ORDERS: usize = 5;
pub const GRAM_EPS: f64 = 1e-6;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_VIM_COMPONENTS: usize = 100;
/// Eigenvalues below this fraction of the largest count as numerically zero.
const RANK_TOL: f64 = 1e-10;

fn safe_only(records: &[FeatureRecord]) -> Vec<&FeatureRecord> {
    records.iter().filter(|r| !r.label.is_unsafe()).collect()
}

fn level_f64(t: &Tensor<f32>) -> (usize, usize, Vec<f64>) {
    let s = t.shape();
    (s[0], s[1] * s[2], t.data().iter().map(|&v| v as f64).collect())
}

fn pooled(t: &Tensor<f32>) -> Vec<f64> {
    let (c, hw, data) = level_f64(t);
    (0..c).map(|i| data[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn signed_pow(x: f64, p: i32) -> f64 {
    x.signum() * x.abs().powi(p)
}

/// `G_p = F^p (F^p)^T / (H W)` for a `[C, H, W]` map with signed elementwise powers.
pub fn gram_matrix(level: &Tensor<f32>, order: usize) -> Vec<f64> {
    let (c, hw, data) = level_f64(level);
    let fp: Vec<f64> = data.iter().map(|&x| signed_pow(x, order as i32)).collect();
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let dot: f64 = fp[i * hw..(i + 1) * hw].iter().zip(&fp[j * hw..(j + 1) * hw]).map(|(a, b)| a * b).sum();
            g[i * c + j] = dot / hw as f64;
            g[j * c + i] = g[i * c + j];
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramStats {
    /// `[scale][order - 1]`.
    pub bounds: Vec<Vec<GramBounds>>,
    pub fit_size: usize,
}

impl GramStats {
    /// Elementwise min/max of every Gram matrix over the safe records.
    pub fn fit(records: &[FeatureRecord]) -> Result<Self> {
        let safe = safe_only(records);
        let first = safe.first().ok_or_else(|| Error::InsufficientData("GRAM fit needs safe records".into()))?;
        let mut bounds: Vec<Vec<GramBounds>> = first
            .pyramid
            .iter()
            .map(|l| {
                (1..=GRAM_ORDERS)
                    .map(|p| {
                        let g = gram_matrix(l, p);
                        GramBounds { min: g.clone(), max: g }
                    })
                    .collect()
            })
            .collect();
        for r in &safe[1..] {
            for (scale, level) in bounds.iter_mut().zip(&r.pyramid) {
                for (p, b) in scale.iter_mut().enumerate() {
                    for ((lo, hi), g) in b.min.iter_mut().zip(b.max.iter_mut()).zip(gram_matrix(level, p + 1)) {
                        *lo = lo.min(g);
                        *hi = hi.max(g);
                    }
                }
            }
        }
        Ok(Self { bounds, fit_size: safe.len() })
    }

    /// Summed bound violations, each relative to the violated bound.
    pub fn deviation(&self, record: &FeatureRecord) -> Result<f64> {
        if record.pyramid.len() != self.bounds.len() {
            return Err(Error::shape("gram_score", format!("{} levels, fitted on {}", record.pyramid.len(), self.bounds.len())));
        }
        let mut total = 0.0;
        for (scale, level) in self.bounds.iter().zip(&record.pyramid) {
            for (p, b) in scale.iter().enumerate() {
                let g = gram_matrix(level, p + 1);
                if g.len() != b.min.len() {
                    return Err(Error::shape("gram_score", "channel count differs from fit".to_string()));
                }
                for ((&v, &lo), &hi) in g.iter().zip(&b.min).zip(&b.max) {
                    if v < lo {
                        total += (lo - v) / (lo.abs() + GRAM_EPS);
                    } else if v > hi {
                        total += (v - hi) / (hi.abs() + GRAM_EPS);
                    }
                }
            }
        }
        Ok(total)
    }

    pub fn score(&self, record: &FeatureRecord) -> Result<f64> {
        Ok(-self.deviation(record)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnIndex {
    pub k: usize,
    /// `[scale][record]`, unit-norm pooled vectors.
    pub scales: Vec<Vec<Vec<f64>>>,
}

/// Distance to the `k`-th nearest row of `rows` (1-based `k`).
pub fn kth_distance(rows: &[Vec<f64>], x: &[f64], k: usize) -> f64 {
    let mut d: Vec<f64> = rows.iter().map(|r| dist(r, x)).collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

impl KnnIndex {
    pub fn fit(records: &[FeatureRecord], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        let safe = safe_only(records);
        if safe.len() < k {
            return Err(Error::InsufficientData(format!("k-NN fit has {} safe records, k = {k}", safe.len())));
        }
        let levels = safe[0].pyramid.len();
        let scales = (0..levels).map(|l| safe.iter().map(|r| normalized(pooled(&r.pyramid[l]))).collect()).collect();
        Ok(Self { k, scales })
    }

    /// Mean over scales of the k-th nearest neighbour distance.
    pub fn distance(&self, record: &FeatureRecord) -> Result<f64> {
        if record.pyramid.len() != self.scales.len() {
            return Err(Error::shape("knn_score", "level count differs from fit".to_string()));
        }
        let total: f64 = self
            .scales
            .iter()
            .zip(&record.pyramid)
            .map(|(rows, level)| kth_distance(rows, &normalized(pooled(level)), self.k))
            .sum();
        Ok(total / self.scales.len() as f64)
    }

    pub fn score(&self, record: &FeatureRecord) -> Result<f64> {
        Ok(-self.distance(record)?)
    }
}

/// Eigen-decomposition of a symmetric `n x n` row-major matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching unit
/// eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if a.len() != n * n {
        return Err(Error::shape("symmetric_eigen", format!("{} entries for n = {n}", a.len())));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 =
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VimScale {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, one per row.
    pub components: Vec<Vec<f64>>,
}

impl VimScale {
    /// PCA of `rows`, keeping at most `q` components, never the full dimension,
    /// and never more than the numerical rank.
    pub fn fit(rows: &[Vec<f64>], q: usize) -> Result<Self> {
        let n = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::InsufficientData("ViM fit needs non-empty vectors".into()));
        }
        let q = q.min(dim - 1);
        if n <= q {
            return Err(Error::InsufficientData(format!("ViM fit has {n} vectors, needs more than {q}")));
        }
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut cov = vec![0.0; dim * dim];
        for r in rows {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..dim {
                for j in i..dim {
                    cov[i * dim + j] += c[i] * c[j] / n as f64;
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                cov[i * dim + j] = cov[j * dim + i];
            }
        }
        let (values, vectors) = symmetric_eigen(&cov, dim)?;
        let top = values.first().copied().unwrap_or(0.0).max(0.0);
        let rank = values.iter().filter(|&&v| v > RANK_TOL * top && v > 0.0).count();
        let components = vectors.into_iter().take(q.min(rank)).collect();
        Ok(Self { mean, components })
    }

    /// `|(x - mu) - P P^T (x - mu)|`.
    pub fn residual(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(Error::shape("vim_score", format!("dim {} vs fitted {}", x.len(), self.mean.len())));
        }
        let mut c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let coords: Vec<f64> = self.components.iter().map(|p| p.iter().zip(&c).map(|(a, b)| a * b).sum()).collect();
        for (p, a) in self.components.iter().zip(coords) {
            c.iter_mut().zip(p).for_each(|(ci, pi)| *ci -= a * pi);
        }
        Ok(c.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VimModel {
    pub scales: Vec<VimScale>,
}

fn wk_vector(r: &FeatureRecord) -> Vec<f64> {
    r.wk.data().iter().map(|&v| v as f64).collect()
}

impl VimModel {
    /// One PCA per pyramid level on spatially pooled safe features.
    pub fn fit(records: &[FeatureRecord], q: usize) -> Result<Self> {
        let safe = safe_only(records);
        let levels = safe.first().ok_or_else(|| Error::InsufficientData("ViM fit needs safe records".into()))?.pyramid.len();
        let scales = (0..levels)
            .map(|l| VimScale::fit(&safe.iter().map(|r| pooled(&r.pyramid[l])).collect::<Vec<_>>(), q))
            .collect::<Result<_>>()?;
        Ok(Self { scales })
    }

    /// A single PCA on the safe world-knowledge embeddings.
    pub fn fit_wk(records: &[FeatureRecord], q: usize) -> Result<Self> {
        let safe = safe_only(records);
        if safe.is_empty() {
            return Err(Error::InsufficientData("ViM fit needs safe records".into()));
        }
        Ok(Self { scales: vec![VimScale::fit(&safe.iter().map(|r| wk_vector(r)).collect::<Vec<_>>(), q)?] })
    }

    pub fn residual(&self, record: &FeatureRecord) -> Result<f64> {
        if record.pyramid.len() != self.scales.len() {
            return Err(Error::shape("vim_score", "level count differs from fit".to_string()));
        }
        self.scales.iter().zip(&record.pyramid).map(|(s, l)| s.residual(&pooled(l))).sum()
    }

    pub fn residual_wk(&self, record: &FeatureRecord) -> Result<f64> {
        self.scales[0].residual(&wk_vector(record))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpEnsembleConfig {
    pub members: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MlpEnsembleConfig {
    fn default() -> Self {
        Self { members: 5, hidden: 64, epochs: 20, lr: 1e-3, batch_size: 32, weight_decay: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// One classifier `wk -> p_unsafe`, stored as plain tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpMember {
    pub widths: Vec<usize>,
    pub params: Vec<NamedTensor>,
}

impl MlpMember {
    fn build(widths: &[usize], seed: u64) -> (ParamStore<f64>, Mlp) {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", widths, &mut SeededRng::stream(seed, 0));
        (store, mlp)
    }

    fn restore(&self) -> Result<(ParamStore<f64>, Mlp)> {
        let (mut store, mlp) = Self::build(&self.widths, 0);
        let tensors = self
            .params
            .iter()
            .map(|t| Ok((t.name.clone(), Tensor::new(t.shape.clone(), t.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        store.load_from(&tensors)?;
        Ok((store, mlp))
    }

    /// Trains one member with Adam on the BCE loss.
    pub fn fit(records: &[FeatureRecord], cfg: &MlpEnsembleConfig, seed: u64) -> Result<Self> {
        let n_unsafe = records.iter().filter(|r| r.label.is_unsafe()).count();
        if n_unsafe == 0 || n_unsafe == records.len() {
            return Err(Error::InsufficientData("MLP ensemble needs both labels".into()));
        }
        if cfg.batch_size == 0 || cfg.hidden == 0 {
            return Err(Error::InvalidArgument("batch_size and hidden must be positive".into()));
        }
        let d = records[0].wk.len();
        let widths = vec![d, cfg.hidden, 1];
        let (mut store, mlp) = Self::build(&widths, seed);
        let mut first: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let mut second = first.clone();
        let mut step = 0u64;
        let mut order: Vec<usize> = (0..records.len()).collect();
        for epoch in 0..cfg.epochs {
            SeededRng::stream(seed, 1 + epoch as u64).shuffle(&mut order);
            for idx in order.chunks(cfg.batch_size) {
                let batch: Vec<&FeatureRecord> = idx.iter().map(|&i| &records[i]).collect();
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape);
                let p = forward(&mut tape, &mlp, &bound, &batch)?;
                let labels: Vec<f64> = batch.iter().map(|r| r.label.as_f64()).collect();
                let loss = loss_var(&mut tape, p, &labels)?;
                let mut grads = tape.backward(loss)?;
                let g = store.gradients(&bound, &mut grads);
                step += 1;
                for (((param, g), m), v) in store.iter_mut().zip(&g).zip(&mut first).zip(&mut second) {
                    adam_update(param.value.data_mut(), g, m, v, step, cfg.lr, cfg.weight_decay);
                }
            }
        }
        if !store.all_finite() {
            return Err(Error::NonFinite("MLP ensemble parameters".into()));
        }
        let params = store
            .iter()
            .map(|p| NamedTensor { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
            .collect();
        Ok(Self { widths, params })
    }

    pub fn predict(&self, records: &[&FeatureRecord]) -> Result<Vec<f64>> {
        let (store, mlp) = self.restore()?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = forward(&mut tape, &mlp, &bound, records)?;
        Ok(tape.value(p).data().to_vec())
    }
}

fn forward(tape: &mut Tape<f64>, mlp: &Mlp, bound: &crate::nn::Bound, batch: &[&FeatureRecord]) -> Result<crate::autodiff::Var> {
    let d = batch[0].wk.len();
    let mut x = Vec::with_capacity(batch.len() * d);
    for r in batch {
        if r.wk.len() != d {
            return Err(Error::shape("dino_mlp", "embedding widths differ".to_string()));
        }
        x.extend(wk_vector(r));
    }
    let x = tape.leaf(Tensor::new([batch.len(), d], x)?);
    let logit = mlp.forward(tape, bound, x)?;
    tape.sigmoid(logit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpEnsemble {
    pub members: Vec<MlpMember>,
}

impl MlpEnsemble {
    pub fn fit(records: &[FeatureRecord], cfg: &MlpEnsembleConfig) -> Result<Self> {
        if cfg.members == 0 {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        }
        let members = (0..cfg.members)
            .map(|i| MlpMember::fit(records, cfg, SeededRng::stream(cfg.seed, 100 + i as u64).next_u64()))
            .collect::<Result<_>>()?;
        Ok(Self { members })
    }

    /// Mean member probability of being unsafe.
    pub fn p_unsafe(&self, records: &[&FeatureRecord]) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; records.len()];
        for m in &self.members {
            for (acc, p) in mean.iter_mut().zip(m.predict(records)?) {
                *acc += p / self.members.len() as f64;
            }
        }
        Ok(mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Gram,
    Knn,
    Vim,
    DinoVim,
    DinoMlp,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] =
        [BaselineKind::Gram, BaselineKind::Knn, BaselineKind::Vim, BaselineKind::DinoVim, BaselineKind::DinoMlp];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Gram => "gram",
            BaselineKind::Knn => "knn",
            BaselineKind::Vim => "vim",
            BaselineKind::DinoVim => "dino-vim",
            BaselineKind::DinoMlp => "dino-mlp",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown baseline {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub k: usize,
    pub vim_components: usize,
    pub mlp: MlpEnsembleConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, vim_components: DEFAULT_VIM_COMPONENTS, mlp: MlpEnsembleConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "kebab-case")]
pub enum Baseline {
    Gram(GramStats),
    Knn(KnnIndex),
    Vim(VimModel),
    DinoVim(VimModel),
    DinoMlp(MlpEnsemble),
}

impl Baseline {
    /// Fits `kind`; everything except the MLP ensemble sees only safe records.
    pub fn fit(kind: BaselineKind, records: &[FeatureRecord], cfg: &BaselineConfig) -> Result<Self> {
        Ok(match kind {
            BaselineKind::Gram => Baseline::Gram(GramStats::fit(records)?),
            BaselineKind::Knn => Baseline::Knn(KnnIndex::fit(records, cfg.k)?),
            BaselineKind::Vim => Baseline::Vim(VimModel::fit(records, cfg.vim_components)?),
            BaselineKind::DinoVim => Baseline::DinoVim(VimModel::fit_wk(records, cfg.vim_components)?),
            BaselineKind::DinoMlp => Baseline::DinoMlp(MlpEnsemble::fit(records, &cfg.mlp)?),
        })
    }

    pub fn kind(&self) -> BaselineKind {
        match self {
            Baseline::Gram(_) => BaselineKind::Gram,
            Baseline::Knn(_) => BaselineKind::Knn,
            Baseline::Vim(_) => BaselineKind::Vim,
            Baseline::DinoVim(_) => BaselineKind::DinoVim,
            Baseline::DinoMlp(_) => BaselineKind::DinoMlp,
        }
    }

    /// Safety scores, higher is safer.
    pub fn score(&self, records: &[FeatureRecord]) -> Result<Vec<f64>> {
        match self {
            Baseline::Gram(g) => records.iter().map(|r| g.score(r)).collect(),
            Baseline::Knn(k) => records.iter().map(|r| k.score(r)).collect(),
            Baseline::Vim(v) => records.iter().map(|r| Ok(-v.residual(r)?)).collect(),
            Baseline::DinoVim(v) => records.iter().map(|r| Ok(-v.residual_wk(r)?)).collect(),
            Baseline::DinoMlp(e) => {
                let mut out = Vec::with_capacity(records.len());
                for chunk in records.chunks(256) {
                    let refs: Vec<&FeatureRecord> = chunk.iter().collect();
                    out.extend(e.p_unsafe(&refs)?.into_iter().map(|p| -p));
                }
                Ok(out)
            }
        }
    }

    pub fn save_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BASELINE_MAGIC)?;
        w.write_all(&BASELINE_VERSION.to_le_bytes())?;
        write_json_block(w, self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_from<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r, "baseline");
        r.magic(BASELINE_MAGIC)?;
        let version = r.u32("version")?;
        if version != BASELINE_VERSION {
            return Err(Error::Version { expected: BASELINE_VERSION, found: version });
        }
        let b: Baseline = read_json_block(&mut r, "baseline")?;
        if !r.at_end()? {
            return Err(Error::Format("trailing bytes after baseline".into()));
        }
        Ok(b)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_from(BufReader::new(File::open(path)?))
    }
}
