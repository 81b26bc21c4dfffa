//! Supervised training of [`FusionModel`] on per-image failure labels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cache::{FeatureCache, FeatureRecord};
use crate::error::{Error, Result};
use crate::fusion::{ArchConfig, FusionModel};
use crate::nn::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

pub const PROB_EPS: f64 = 1e-7;
pub const COLLAPSE_THRESHOLD: f64 = 0.98;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
const TRUST_EPS: f64 = 1e-9;
pub const DESK_LARS_ETA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lars,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lars_eta: f64,
    pub epochs: usize,
    pub t_max: f64,
    pub eta_min: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Fraction of records used for training; the rest is held out for validation.
    pub split: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            lr: 0.00095,
            momentum: 0.9,
            weight_decay: 0.0009,
            lars_eta: 0.001,
            epochs: 60,
            t_max: 60.0,
            eta_min: 5e-7,
            clip_norm: 1.0,
            batch_size: 6,
            optimizer: OptimizerKind::Lars,
            split: 0.9,
            seed: 0,
        }
    }

    /// Full-size settings with a larger LARS trust coefficient. At desk scale the
    /// full-size `lr * eta` moves each weight tensor by about 1e-6 of its norm per
    /// step, which is too slow to train in 60 epochs of a few thousand records.
    pub fn desk() -> Self {
        Self { lars_eta: DESK_LARS_ETA, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lars_eta", self.lars_eta),
            ("t_max", self.t_max),
            ("eta_min", self.eta_min),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::InvalidArgument(format!("momentum {} must be below 1", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidArgument(format!("split {} outside (0,1)", self.split)));
        }
        Ok(())
    }
}

/// `eta_min + (lr - eta_min) (1 + cos(pi * epoch / t_max)) / 2`.
pub fn cosine_lr(epoch: f64, cfg: &TrainConfig) -> f64 {
    cfg.eta_min + 0.5 * (cfg.lr - cfg.eta_min) * (1.0 + (std::f64::consts::PI * epoch / cfg.t_max).cos())
}

/// Binary cross-entropy with the probability clamped to `[eps, 1 - eps]`.
pub fn bce_loss(p_unsafe: f64, label: f64) -> f64 {
    let p = p_unsafe.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Records the clamped mean BCE of `p_unsafe` against `labels`.
pub fn loss_var<T: Scalar>(tape: &mut Tape<T>, p_unsafe: Var, labels: &[T]) -> Result<Var> {
    let eps = T::from_f64_lossy(PROB_EPS);
    let p = tape.clamp(p_unsafe, eps, T::one() - eps)?;
    let l = tape.bce(p, labels)?;
    tape.mean(l)
}

/// Scales every gradient by `max_norm / norm` when the global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

fn l2<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LarsHyper {
    pub momentum: f64,
    pub weight_decay: f64,
    pub eta: f64,
}

/// One LARS update of a single parameter tensor.
///
/// `g = grad + wd * w`; `trust = eta |w| / (|g| + 1e-9)` when both norms are
/// non-zero and `use_trust`, else 1; `m = momentum * m + trust * lr * g`; `w -= m`.
pub fn lars_update<T: Scalar>(w: &mut [T], grad: &[T], m: &mut [T], lr: f64, hp: &LarsHyper, use_trust: bool) {
    let wd = T::from_f64_lossy(hp.weight_decay);
    let g: Vec<T> = grad.iter().zip(w.iter()).map(|(&g, &w)| g + wd * w).collect();
    let (wn, gn) = (l2(w), l2(&g));
    let trust = if use_trust && wn > 0.0 && gn > 0.0 { hp.eta * wn / (gn + TRUST_EPS) } else { 1.0 };
    let step = T::from_f64_lossy(trust * lr);
    let mu = T::from_f64_lossy(hp.momentum);
    for ((w, m), g) in w.iter_mut().zip(m.iter_mut()).zip(g) {
        *m = mu * *m + step * g;
        *w -= *m;
    }
}

/// One Adam update with coupled weight decay; `t` is the 1-based step count.
pub fn adam_update<T: Scalar>(w: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, weight_decay: f64) {
    let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((w, &g), m), v) in w.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g.to_f64_lossy() + weight_decay * w.to_f64_lossy();
        let mn = b1 * m.to_f64_lossy() + (1.0 - b1) * g;
        let vn = b2 * v.to_f64_lossy() + (1.0 - b2) * g * g;
        *m = T::from_f64_lossy(mn);
        *v = T::from_f64_lossy(vn);
        let upd = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
        *w -= T::from_f64_lossy(upd);
    }
}

/// Applies one LARS step to every tensor of `params`. Biases and norms skip the trust ratio.
pub fn lars_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Vec<T>], momentum: &mut [Vec<T>], lr: f64, hp: &LarsHyper) {
    for ((p, g), m) in params.iter_mut().zip(grads).zip(momentum.iter_mut()) {
        let trust = p.kind.uses_trust_ratio();
        lars_update(p.value.data_mut(), g, m, lr, hp, trust);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_cos: f64,
    pub val_loss: f64,
    pub val_mean_cos: f64,
    pub collapse_warning: bool,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Momentum buffers (LARS) or first moments (Adam), mirroring the parameters.
    pub first: Vec<Vec<T>>,
    /// Second moments; empty for LARS.
    pub second: Vec<Vec<T>>,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ParamStore<T>, optimizer: OptimizerKind) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.len()]).collect::<Vec<_>>();
        Self {
            first: zeros(),
            second: if optimizer == OptimizerKind::Adam { zeros() } else { Vec::new() },
            step: 0,
            epoch: 0,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub mean_cos: f64,
    pub grad_norm: f64,
}

fn row_cosines<'a, T: Scalar>(a: &'a [T], b: &'a [T], d: usize) -> impl Iterator<Item = f64> + 'a {
    a.chunks(d).zip(b.chunks(d)).map(|(x, y)| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p.to_f64_lossy() * q.to_f64_lossy()).sum();
        let n = l2(x) * l2(y);
        if n > 0.0 {
            dot / n
        } else {
            0.0
        }
    })
}

fn labels_of<T: Scalar>(batch: &[&FeatureRecord]) -> Vec<T> {
    batch.iter().map(|r| T::from_f64_lossy(r.label.as_f64())).collect()
}

pub struct Trainer<T> {
    pub model: FusionModel<T>,
    pub cfg: TrainConfig,
    pub state: TrainState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: FusionModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = TrainState::new(&model.params, cfg.optimizer);
        Ok(Self { model, cfg, state })
    }

    /// Forward, backward, clip, and one optimizer update on `batch`.
    pub fn step(&mut self, batch: &[&FeatureRecord], lr: f64) -> Result<BatchStats> {
        let mut tape = Tape::new();
        let (bound, out) = self.model.forward_batch(&mut tape, batch)?;
        let loss = loss_var(&mut tape, out.p_unsafe, &labels_of(batch))?;
        let loss_value = tape.value(loss).data()[0].to_f64_lossy();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let d = self.model.arch.embed_dim;
        let cos: f64 = row_cosines(tape.value(out.e_pr).data(), tape.value(out.e_wk).data(), d).sum();
        let mut grads = tape.backward(loss)?;
        let mut g = self.model.params.gradients(&bound, &mut grads);
        let grad_norm = clip_gradients(&mut g, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        self.state.step += 1;
        match self.cfg.optimizer {
            OptimizerKind::Lars => {
                let hp = LarsHyper { momentum: self.cfg.momentum, weight_decay: self.cfg.weight_decay, eta: self.cfg.lars_eta };
                lars_step(&mut self.model.params, &g, &mut self.state.first, lr, &hp);
            }
            OptimizerKind::Adam => {
                let t = self.state.step;
                for (((p, g), m), v) in
                    self.model.params.iter_mut().zip(&g).zip(&mut self.state.first).zip(&mut self.state.second)
                {
                    adam_update(p.value.data_mut(), g, m, v, t, lr, self.cfg.weight_decay);
                }
            }
        }
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(BatchStats { loss: loss_value, mean_cos: cos / batch.len() as f64, grad_norm })
    }

    /// Mean loss and mean embedding cosine over `records`, without updating.
    pub fn evaluate(&self, records: &[&FeatureRecord]) -> Result<(f64, f64)> {
        let (mut loss, mut cos) = (0.0, 0.0);
        let d = self.model.arch.embed_dim;
        for chunk in records.chunks(self.cfg.batch_size.max(32)) {
            let mut tape = Tape::new();
            let (_, out) = self.model.forward_batch(&mut tape, chunk)?;
            let l = loss_var(&mut tape, out.p_unsafe, &labels_of(chunk))?;
            loss += tape.value(l).data()[0].to_f64_lossy() * chunk.len() as f64;
            cos += row_cosines(tape.value(out.e_pr).data(), tape.value(out.e_wk).data(), d).sum::<f64>();
        }
        let n = records.len().max(1) as f64;
        Ok((loss / n, cos / n))
    }

    /// One pass over `train` in a seeded shuffled order, keeping the last partial batch.
    pub fn epoch(&mut self, train: &[&FeatureRecord], val: &[&FeatureRecord]) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let lr = cosine_lr(epoch as f64, &self.cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::stream(self.cfg.seed, 1000 + epoch as u64).shuffle(&mut order);
        let (mut loss, mut cos) = (0.0, 0.0);
        for idx in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&FeatureRecord> = idx.iter().map(|&i| train[i]).collect();
            let s = self.step(&batch, lr)?;
            loss += s.loss * batch.len() as f64;
            cos += s.mean_cos * batch.len() as f64;
        }
        let n = train.len() as f64;
        let (val_loss, val_mean_cos) = if val.is_empty() { (f64::NAN, f64::NAN) } else { self.evaluate(val)? };
        let mean_cos = cos / n;
        let log = EpochLog {
            epoch,
            lr,
            loss: loss / n,
            mean_cos,
            val_loss,
            val_mean_cos,
            collapse_warning: mean_cos > COLLAPSE_THRESHOLD,
        };
        self.state.epoch += 1;
        self.state.history.push(log.clone());
        Ok(log)
    }
}

/// Seeded train/validation split of record indices.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    SeededRng::stream(seed, 2).shuffle(&mut idx);
    let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let val = idx.split_off(n_train);
    (idx, val)
}

/// Trains a fresh model on `cache`, calling `on_epoch` after every epoch.
pub fn train_with<T: Scalar>(
    cache: &FeatureCache,
    cfg: &TrainConfig,
    arch: &ArchConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(FusionModel<T>, TrainState<T>)> {
    cfg.validate()?;
    let records = &cache.records;
    if records.len() < 2 * cfg.batch_size {
        return Err(Error::InsufficientData(format!("{} records, need at least {}", records.len(), 2 * cfg.batch_size)));
    }
    let (train_idx, val_idx) = split_indices(records.len(), cfg.split, cfg.seed);
    let train: Vec<&FeatureRecord> = train_idx.iter().map(|&i| &records[i]).collect();
    let val: Vec<&FeatureRecord> = val_idx.iter().map(|&i| &records[i]).collect();
    let n_unsafe = train.iter().filter(|r| r.label.is_unsafe()).count();
    if n_unsafe == 0 || n_unsafe == train.len() {
        return Err(Error::InsufficientData("training split contains a single class".into()));
    }
    let model = FusionModel::new(arch.clone(), cache.spec.clone(), cache.d_wk, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    for _ in 0..cfg.epochs {
        let log = trainer.epoch(&train, &val)?;
        on_epoch(&log);
    }
    Ok((trainer.model, trainer.state))
}

pub fn train<T: Scalar>(cache: &FeatureCache, cfg: &TrainConfig, arch: &ArchConfig) -> Result<(FusionModel<T>, TrainState<T>)> {
    train_with(cache, cfg, arch, |_| {})
}
