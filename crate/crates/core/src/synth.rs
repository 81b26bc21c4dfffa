//! Planted-anomaly generator standing in for frozen backbones.
//!
//! A fixed "world" (drawn from `world_seed`) maps a 16-dimensional latent to
//! every pyramid level and to the world-knowledge embedding. Safe records use the
//! same latent for both; unsafe records draw the embedding from a latent that is
//! only partly correlated with the image latent, shift it along a fixed failure
//! direction, and blank a window of the finest level. `hardness` in [0, 1] shrinks
//! all three signals and raises the noise.

use std::f64::consts::TAU;

use crate::cache::{FeatureRecord, PyramidSpec, SafetyLabel};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 16;
pub const DEFAULT_WORLD_SEED: u64 = 0x6b67_6670_776f_726c;

const NOISE_BASE: f64 = 0.1;
const NOISE_PER_HARDNESS: f64 = 0.4;
const FAILURE_OFFSET: f64 = 5.0;
const WINDOW_FRACTION: f64 = 0.25;
const BIAS_SCALE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub n: usize,
    pub unsafe_fraction: f64,
    pub hardness: f64,
    pub seed: u64,
    /// Seeds the planted model; caches meant to be used together must share it.
    pub world_seed: u64,
    pub domain: String,
    /// Strength of the covariate shift applied to every record (0 for in-distribution).
    pub shift: f64,
}

impl SynthParams {
    pub fn new(n: usize, unsafe_fraction: f64, hardness: f64, seed: u64) -> Self {
        Self { n, unsafe_fraction, hardness, seed, world_seed: DEFAULT_WORLD_SEED, domain: "id".into(), shift: 0.0 }
    }

    pub fn shifted(mut self, domain: impl Into<String>, shift: f64) -> Self {
        self.domain = domain.into();
        self.shift = shift;
        self
    }

    pub fn unsafe_count(&self) -> usize {
        (self.n as f64 * self.unsafe_fraction).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if !(self.unsafe_fraction > 0.0 && self.unsafe_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("unsafe_fraction {} outside (0,1)", self.unsafe_fraction)));
        }
        if !(0.0..=1.0).contains(&self.hardness) {
            return Err(Error::InvalidArgument(format!("hardness {} outside [0,1]", self.hardness)));
        }
        if !self.shift.is_finite() || self.shift < 0.0 {
            return Err(Error::InvalidArgument(format!("shift {} must be finite and non-negative", self.shift)));
        }
        Ok(())
    }
}

struct LevelLift {
    channels: usize,
    positions: usize,
    /// [C, LATENT_DIM]
    mixing: Vec<f64>,
    /// [LATENT_DIM, H*W], unit-RMS plane waves
    basis: Vec<f64>,
    /// [C]
    bias: Vec<f64>,
    /// [C*H*W]
    shift_pattern: Vec<f64>,
}

struct World {
    levels: Vec<LevelLift>,
    /// [d_wk, LATENT_DIM]
    wk_lift: Vec<f64>,
    wk_bias: Vec<f64>,
    failure_dir: Vec<f64>,
    wk_shift: Vec<f64>,
}

fn unit_vector(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl World {
    fn new(spec: &PyramidSpec, d_wk: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let scale = 1.0 / (LATENT_DIM as f64).sqrt();
        let levels = spec
            .levels
            .iter()
            .map(|l| {
                let (h, w) = (l.height, l.width);
                let mixing = (0..l.channels * LATENT_DIM).map(|_| rng.normal() * scale).collect();
                let mut basis = Vec::with_capacity(LATENT_DIM * h * w);
                for _ in 0..LATENT_DIM {
                    let fy = rng.int_inclusive(0, 2) as f64;
                    let fx = rng.int_inclusive(0, 2) as f64;
                    let phase = rng.uniform(0.0, TAU);
                    for y in 0..h {
                        for x in 0..w {
                            let arg = TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                            basis.push(std::f64::consts::SQRT_2 * arg.cos());
                        }
                    }
                }
                let bias = (0..l.channels).map(|_| rng.normal() * BIAS_SCALE).collect();
                let shift_pattern = (0..l.len()).map(|_| rng.normal()).collect();
                LevelLift { channels: l.channels, positions: h * w, mixing, basis, bias, shift_pattern }
            })
            .collect();
        let wk_lift = (0..d_wk * LATENT_DIM).map(|_| rng.normal() * scale).collect();
        let wk_bias = (0..d_wk).map(|_| rng.normal() * BIAS_SCALE).collect();
        let failure_dir = unit_vector(&mut rng, d_wk);
        let wk_shift = unit_vector(&mut rng, d_wk);
        Self { levels, wk_lift, wk_bias, failure_dir, wk_shift }
    }

    fn lift_level(&self, level: usize, u: &[f64], out: &mut [f64]) {
        let l = &self.levels[level];
        for c in 0..l.channels {
            let row = &mut out[c * l.positions..(c + 1) * l.positions];
            row.fill(l.bias[c]);
            for (k, &uk) in u.iter().enumerate() {
                let a = l.mixing[c * LATENT_DIM + k] * uk;
                let basis = &l.basis[k * l.positions..(k + 1) * l.positions];
                for (o, b) in row.iter_mut().zip(basis) {
                    *o += a * b;
                }
            }
        }
    }

    fn lift_wk(&self, v: &[f64]) -> Vec<f64> {
        self.wk_bias
            .iter()
            .enumerate()
            .map(|(i, b)| b + (0..LATENT_DIM).map(|k| self.wk_lift[i * LATENT_DIM + k] * v[k]).sum::<f64>())
            .collect()
    }
}

fn object_counts(rng: &mut SeededRng, label: SafetyLabel) -> (u32, u32, u32) {
    let gt = rng.int_inclusive(1, 5);
    let matched = match label {
        SafetyLabel::Safe => gt,
        SafetyLabel::Unsafe => rng.int_inclusive(0, gt - 1),
    };
    let extra = rng.int_inclusive(0, 2);
    (gt as u32, matched as u32, (matched + extra) as u32)
}

/// Generates `params.n` records against `spec`, exactly `params.unsafe_count()` of them unsafe.
pub fn generate(spec: &PyramidSpec, d_wk: usize, params: &SynthParams) -> Result<Vec<FeatureRecord>> {
    spec.validate()?;
    params.validate()?;
    if d_wk == 0 {
        return Err(Error::InvalidArgument("d_wk must be positive".into()));
    }
    let world = World::new(spec, d_wk, params.world_seed);
    let h = params.hardness;
    let sigma = (NOISE_BASE + NOISE_PER_HARDNESS * h) * (1.0 + params.shift);
    let rho = h;
    let offset = FAILURE_OFFSET * (1.0 - h).powi(2);

    let mut labels = vec![SafetyLabel::Safe; params.n];
    labels[..params.unsafe_count()].fill(SafetyLabel::Unsafe);
    SeededRng::stream(params.seed, 0).shuffle(&mut labels);

    let mut records = Vec::with_capacity(params.n);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = SeededRng::stream(params.seed, i as u64 + 1);
        let u: Vec<f64> = (0..LATENT_DIM).map(|_| rng.normal()).collect();

        let mut pyramid = Vec::with_capacity(spec.levels.len());
        for (li, l) in spec.levels.iter().enumerate() {
            let mut buf = vec![0.0; l.len()];
            world.lift_level(li, &u, &mut buf);
            let pattern = &world.levels[li].shift_pattern;
            for (o, s) in buf.iter_mut().zip(pattern) {
                *o += sigma * rng.normal() + params.shift * s;
            }
            if li == 0 && label.is_unsafe() {
                let wy = ((l.height as f64 * WINDOW_FRACTION * (1.0 - h)).round() as usize).max(1);
                let wx = ((l.width as f64 * WINDOW_FRACTION * (1.0 - h)).round() as usize).max(1);
                let y0 = rng.int_inclusive(0, l.height - wy);
                let x0 = rng.int_inclusive(0, l.width - wx);
                for c in 0..l.channels {
                    for y in y0..y0 + wy {
                        let start = (c * l.height + y) * l.width + x0;
                        buf[start..start + wx].fill(0.0);
                    }
                }
            }
            pyramid.push(Tensor::new(l.shape().to_vec(), buf.into_iter().map(|v| v as f32).collect())?);
        }

        let latent: Vec<f64> = match label {
            SafetyLabel::Safe => u,
            SafetyLabel::Unsafe => {
                let mix = (1.0 - rho * rho).sqrt();
                u.iter().map(|&x| rho * x + mix * rng.normal()).collect()
            }
        };
        let mut wk = world.lift_wk(&latent);
        for (j, v) in wk.iter_mut().enumerate() {
            *v += sigma * rng.normal() + params.shift * world.wk_shift[j];
            if label.is_unsafe() {
                *v += offset * world.failure_dir[j];
            }
        }

        let (gt_count, matched_count, pred_count) = object_counts(&mut rng, label);
        records.push(FeatureRecord {
            id: format!("{}-{:06}", params.domain, i),
            pyramid,
            wk: Tensor::new([d_wk], wk.into_iter().map(|v| v as f32).collect())?,
            label,
            gt_count,
            matched_count,
            pred_count,
            domain: params.domain.clone(),
        });
    }
    Ok(records)
}

pub fn generate_synthetic(
    spec: &PyramidSpec,
    d_wk: usize,
    n: usize,
    unsafe_fraction: f64,
    hardness: f64,
    seed: u64,
) -> Result<Vec<FeatureRecord>> {
    generate(spec, d_wk, &SynthParams::new(n, unsafe_fraction, hardness, seed))
}
