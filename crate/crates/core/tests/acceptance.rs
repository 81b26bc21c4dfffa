//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! `PASS`/`FAIL` line per criterion; exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use kgfp::autodiff::{Tape, Var};
use kgfp::baselines::{kth_distance, Baseline, BaselineConfig, BaselineKind, GramStats, KnnIndex, VimScale, GRAM_EPS};
use kgfp::cache::{FeatureCache, FeatureRecord, PyramidSpec};
use kgfp::error::Result;
use kgfp::fusion::{ArchConfig, FusionModel, HeadKind};
use kgfp::gradcheck;
use kgfp::labeling::{iou, BBox};
use kgfp::metrics::{auroc, fpr_at, random_pair_exceedances, EvalReport, ScoredRecord, REFERENCE_THRESHOLD};
use kgfp::nn::{Bound, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore, TransformerBlock};
use kgfp::pipeline::Scorer;
use kgfp::rng::SeededRng;
use kgfp::synth::{generate, generate_synthetic, SynthParams};
use kgfp::tensor::Tensor;
use kgfp::trainer::{lars_update, train, LarsHyper, OptimizerKind, TrainConfig};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

const D_WK: usize = 32;
const TARGET_FPR: f64 = 0.05;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.1}s of {limit_s:.0}s"))
}

// ---------------------------------------------------------------- gradients

fn rand_t(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Scalar loss from any output through a fixed random projection.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let len = tape.value(x).len();
    let mut rng = SeededRng::new(seed);
    let w = tape.leaf(Tensor::from_fn([len, 1], |_| rng.normal()));
    let flat = tape.gather(&[x], (0..len as u32).map(|i| (0, i)).collect(), [1, len])?;
    let y = tape.matmul(flat, w)?;
    tape.mean(y)
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn primitive_cases() -> Vec<OpCase> {
    let mut rng = SeededRng::new(100);
    let mut cases: Vec<OpCase> = Vec::new();
    let m = |rng: &mut SeededRng, s: &[usize]| rand_t(rng, s);
    cases.push((
        "matmul",
        vec![m(&mut rng, &[4, 5]), m(&mut rng, &[5, 3])],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        }),
    ));
    cases.push((
        "add",
        vec![m(&mut rng, &[3, 4]), m(&mut rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 2)
        }),
    ));
    cases.push((
        "add_tiled",
        vec![m(&mut rng, &[6, 3]), m(&mut rng, &[3])],
        Box::new(|t, v| {
            let y = t.add_tiled(v[0], v[1])?;
            project(t, y, 3)
        }),
    ));
    cases.push((
        "add_grouped",
        vec![m(&mut rng, &[6, 3]), m(&mut rng, &[2, 3])],
        Box::new(|t, v| {
            let y = t.add_grouped(v[0], v[1])?;
            project(t, y, 4)
        }),
    ));
    cases.push((
        "scale+affine",
        vec![m(&mut rng, &[5])],
        Box::new(|t, v| {
            let y = t.scale(v[0], -1.7)?;
            let y = t.affine(y, 0.3, 2.0)?;
            project(t, y, 5)
        }),
    ));
    cases.push((
        "layer_norm",
        vec![m(&mut rng, &[3, 8]), m(&mut rng, &[8]), m(&mut rng, &[8])],
        Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 6)
        }),
    ));
    cases.push((
        "gelu",
        vec![m(&mut rng, &[2, 6])],
        Box::new(|t, v| {
            let y = t.gelu(v[0])?;
            project(t, y, 7)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![m(&mut rng, &[2, 6])],
        Box::new(|t, v| {
            let y = t.sigmoid(v[0])?;
            project(t, y, 8)
        }),
    ));
    cases.push((
        "softmax",
        vec![m(&mut rng, &[2, 6])],
        Box::new(|t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 9)
        }),
    ));
    cases.push((
        "attention",
        vec![m(&mut rng, &[6, 4]), m(&mut rng, &[10, 4]), m(&mut rng, &[10, 4])],
        Box::new(|t, v| {
            let y = t.attention(v[0], v[1], v[2], 2, 2)?;
            project(t, y, 10)
        }),
    ));
    cases.push((
        "mean_groups",
        vec![m(&mut rng, &[6, 3])],
        Box::new(|t, v| {
            let y = t.mean_groups(v[0], 3)?;
            project(t, y, 11)
        }),
    ));
    cases.push((
        "gather",
        vec![m(&mut rng, &[2, 3]), m(&mut rng, &[4])],
        Box::new(|t, v| {
            let y = t.gather(&[v[0], v[1]], vec![(0, 5), (1, 0), (0, 5), (1, 3)], [2, 2])?;
            project(t, y, 12)
        }),
    ));
    cases.push((
        "cosine_rows",
        vec![m(&mut rng, &[3, 5]), m(&mut rng, &[3, 5])],
        Box::new(|t, v| {
            let y = t.cosine_rows(v[0], v[1])?;
            project(t, y, 13)
        }),
    ));
    cases.push((
        "clamp+bce+mean",
        vec![Tensor::vector(vec![0.2, 0.7, 0.55, 0.9])],
        Box::new(|t, v| {
            let p = t.clamp(v[0], 1e-7, 1.0 - 1e-7)?;
            let l = t.bce(p, &[0.0, 1.0, 1.0, 0.0])?;
            t.mean(l)
        }),
    ));
    cases
}

/// Gradient check of a parameterised module with its parameters as leaves.
fn module_check(
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
    seed: u64,
) -> Result<f64> {
    let n = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).collect();
    inputs.extend(extra);
    gradcheck::check(
        &inputs,
        |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let y = f(t, &p, &v[n..])?;
            project(t, y, seed)
        },
        1e-4,
        1e-7,
    )
}

fn module_cases() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = SeededRng::new(200);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 4, 3, &mut rng);
    let x = rand_t(&mut rng, &[2, 4]);
    out.push(("Linear", module_check(&s, vec![x], |t, p, v| lin.forward(t, p, v[0]), 21)?));

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 5);
    for p in s.iter_mut() {
        p.value = rand_t(&mut rng, p.value.shape());
    }
    let x = rand_t(&mut rng, &[3, 5]);
    out.push(("LayerNorm", module_check(&s, vec![x], |t, p, v| ln.forward(t, p, v[0]), 22)?));

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "mha", 4, 3, 2, &mut rng)?;
    let (q, kv) = (rand_t(&mut rng, &[2 * 3, 4]), rand_t(&mut rng, &[2 * 2, 3]));
    out.push(("MultiHeadAttention", module_check(&s, vec![q, kv], |t, p, v| mha.forward(t, p, v[0], v[1], 2), 23)?));

    let mut s = ParamStore::new();
    let ff = FeedForward::new(&mut s, "ff", 3, &mut rng);
    let x = rand_t(&mut rng, &[2, 3]);
    out.push(("FeedForward", module_check(&s, vec![x], |t, p, v| ff.forward(t, p, v[0]), 24)?));

    let mut s = ParamStore::new();
    let blk = TransformerBlock::new(&mut s, "blk", 4, 4, 2, &mut rng)?;
    let x = rand_t(&mut rng, &[2 * 3, 4]);
    out.push(("TransformerBlock self", module_check(&s, vec![x], |t, p, v| blk.forward_self(t, p, v[0], 2), 25)?));

    let mut s = ParamStore::new();
    let blk = TransformerBlock::new(&mut s, "blk", 4, 2, 2, &mut rng)?;
    let (x, kv) = (rand_t(&mut rng, &[2 * 3, 4]), rand_t(&mut rng, &[2, 2]));
    out.push(("TransformerBlock cross", module_check(&s, vec![x, kv], |t, p, v| blk.forward_cross(t, p, v[0], v[1], 2), 26)?));

    let mut s = ParamStore::new();
    let mlp = Mlp::new(&mut s, "mlp", &[3, 5, 4, 2], &mut rng);
    let x = rand_t(&mut rng, &[2, 3]);
    out.push(("Mlp", module_check(&s, vec![x], |t, p, v| mlp.forward(t, p, v[0]), 27)?));
    Ok(out)
}

fn tiny_network_check(head: HeadKind) -> Result<f64> {
    let spec = PyramidSpec::from_dims(&[(2, 4, 4), (3, 2, 2)])?;
    let arch = ArchConfig {
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
        head_kind: head,
    };
    let recs = generate_synthetic(&spec, 3, 2, 0.5, 0.3, 17)?;
    let refs: Vec<&FeatureRecord> = recs.iter().collect();
    let m = FusionModel::<f64>::new(arch, spec, 3, 5)?;
    let (levels, wk) = m.batch_inputs(&refs)?;
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
}

fn gradient_integrity() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst_op: (f64, &str) = (0.0, "");
    for (name, inputs, f) in primitive_cases() {
        let w = gradcheck::check(&inputs, f, 1e-4, 1e-7)?;
        if w > worst_op.0 {
            worst_op = (w, name);
        }
    }
    for (name, w) in module_cases()? {
        if w > worst_op.0 {
            worst_op = (w, name);
        }
    }
    let net = tiny_network_check(HeadKind::Cosine)?.max(tiny_network_check(HeadKind::Mlp)?);
    let (fast, t) = within(start.elapsed(), 60.0);
    Ok(verdict(
        worst_op.0 <= 1.0 && net <= 1.0 && fast,
        format!("worst per-op ratio {:.3} ({}), end-to-end ratio {net:.3} (<= 1 passes), {t}", worst_op.0, worst_op.1),
    ))
}

// ---------------------------------------------------------------- oracles

fn pair_auroc(s: &[ScoredRecord]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for u in s.iter().filter(|r| r.label.is_unsafe()) {
        for v in s.iter().filter(|r| !r.label.is_unsafe()) {
            pairs += 1.0;
            wins += if u.score < v.score {
                1.0
            } else if u.score == v.score {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |bx: &BBox, x: i64, y: i64| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx > bx.x1 && cx < bx.x2 && cy > bx.y1 && cy < bx.y2
    };
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..40 {
        for x in 0..40 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    inter as f64 / union as f64
}

fn pooled_unit(t: &Tensor<f32>) -> Vec<f64> {
    let c = t.shape()[0];
    let hw = t.len() / c;
    let v: Vec<f64> = (0..c).map(|i| t.data()[i * hw..(i + 1) * hw].iter().map(|&x| x as f64).sum::<f64>() / hw as f64).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn oracle_equivalence() -> Result<Verdict> {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;

    // AUROC against pair counting on tied, random sets.
    let mut rng = SeededRng::new(300);
    let mut worst = 0.0f64;
    let spec = PyramidSpec::desk();
    let base = generate_synthetic(&spec, 4, 200, 0.3, 0.5, 301)?;
    for trial in 0..50 {
        let n = 2 + (trial * 37) % 199;
        let s: Vec<ScoredRecord> =
            base[..n].iter().map(|r| ScoredRecord::new(r, (rng.uniform(0.0, 8.0)).floor() / 8.0)).collect();
        if s.iter().all(|r| r.label.is_unsafe()) || s.iter().all(|r| !r.label.is_unsafe()) {
            continue;
        }
        worst = worst.max((auroc(&s)? - pair_auroc(&s)).abs());
    }
    ok &= worst <= 1e-12;
    notes.push(format!("auroc {worst:.1e}"));

    // k-NN against pairwise brute force.
    let recs = generate_synthetic(&spec, 4, 120, 0.3, 0.5, 302)?;
    let fit: Vec<FeatureRecord> = recs[..100].to_vec();
    let idx = KnnIndex::fit(&fit, 5)?;
    let safe: Vec<&FeatureRecord> = fit.iter().filter(|r| !r.label.is_unsafe()).collect();
    let mut worst = 0.0f64;
    for probe in &recs[100..] {
        let mut total = 0.0;
        for l in 0..spec.levels.len() {
            let q = pooled_unit(&probe.pyramid[l]);
            let mut d: Vec<f64> = safe
                .iter()
                .map(|r| pooled_unit(&r.pyramid[l]).iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            total += d[4];
        }
        worst = worst.max((idx.distance(probe)? - total / spec.levels.len() as f64).abs());
    }
    let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
    worst = worst.max((kth_distance(&rows, &rows[0], 1)).abs());
    ok &= worst <= 1e-12;
    notes.push(format!("knn {worst:.1e}"));

    // ViM residual against a dense eigensolver.
    let dim = 20;
    let rows: Vec<Vec<f64>> = (0..80).map(|_| (0..dim).map(|j| rng.normal() * (1.0 + 0.3 * j as f64)).collect()).collect();
    let q = 6;
    let model = VimScale::fit(&rows, q)?;
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centered = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j] - mean[j]);
    let eig = SymmetricEigen::new(centered.transpose() * &centered / n);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..dim).map(|_| rng.normal() * 2.0).collect();
        let c = DVector::from_fn(dim, |j, _| x[j] - mean[j]);
        let mut r = c.clone();
        for &k in &order[..q] {
            let p = eig.eigenvectors.column(k);
            r -= p * p.dot(&c);
        }
        worst = worst.max((model.residual(&x)? - r.norm()).abs());
    }
    ok &= worst <= 1e-6;
    notes.push(format!("vim {worst:.1e}"));

    // GRAM deviation against elementwise recomputation.
    let small = PyramidSpec::from_dims(&[(3, 4, 4), (4, 2, 2)])?;
    let recs = generate_synthetic(&small, 4, 30, 0.3, 0.5, 303)?;
    let fit: Vec<FeatureRecord> = recs.iter().filter(|r| !r.label.is_unsafe()).take(10).cloned().collect();
    let stats = GramStats::fit(&fit)?;
    let mut worst = 0.0f64;
    for probe in recs.iter().rev().take(5) {
        let mut want = 0.0;
        for (l, level) in probe.pyramid.iter().enumerate() {
            let (c, h, w) = (level.shape()[0], level.shape()[1], level.shape()[2]);
            for p in 1..=5 {
                let elem = |t: &Tensor<f32>, i: usize, j: usize| {
                    let mut s = 0.0;
                    for k in 0..h * w {
                        let a = t.data()[i * h * w + k] as f64;
                        let b = t.data()[j * h * w + k] as f64;
                        s += a.signum() * a.abs().powi(p) * b.signum() * b.abs().powi(p);
                    }
                    s / (h * w) as f64
                };
                for i in 0..c {
                    for j in 0..c {
                        let vals: Vec<f64> = fit.iter().map(|r| elem(&r.pyramid[l], i, j)).collect();
                        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let v = elem(level, i, j);
                        if v < lo {
                            want += (lo - v) / (lo.abs() + GRAM_EPS);
                        } else if v > hi {
                            want += (v - hi) / (hi.abs() + GRAM_EPS);
                        }
                    }
                }
            }
        }
        worst = worst.max((stats.deviation(probe)? - want).abs() / want.abs().max(1.0));
    }
    ok &= worst <= 1e-9;
    notes.push(format!("gram {worst:.1e}"));

    // LARS against a scripted two-step hand computation.
    let hp = LarsHyper { momentum: 0.9, weight_decay: 0.1, eta: 0.5 };
    let (mut w, mut m) = (vec![3.0f64, 4.0], vec![0.0; 2]);
    lars_update(&mut w, &[1.0, 0.0], &mut m, 0.1, &hp, true);
    let t1 = 2.5 / (1.85f64.sqrt() + 1e-9);
    let m1 = [t1 * 0.1 * 1.3, t1 * 0.1 * 0.4];
    let w1 = [3.0 - m1[0], 4.0 - m1[1]];
    lars_update(&mut w, &[-0.5, 0.25], &mut m, 0.05, &hp, true);
    let g2 = [-0.5 + 0.1 * w1[0], 0.25 + 0.1 * w1[1]];
    let t2 = 0.5 * (w1[0].powi(2) + w1[1].powi(2)).sqrt() / ((g2[0].powi(2) + g2[1].powi(2)).sqrt() + 1e-9);
    let m2 = [0.9 * m1[0] + t2 * 0.05 * g2[0], 0.9 * m1[1] + t2 * 0.05 * g2[1]];
    let (mut w0, mut m0) = (vec![2.0f64], vec![0.0]);
    lars_update(&mut w0, &[1.0], &mut m0, 1.0, &LarsHyper { momentum: 0.0, weight_decay: 0.0, eta: 0.001 }, true);
    let worst = (w[0] - (w1[0] - m2[0])).abs().max((w[1] - (w1[1] - m2[1])).abs()).max((2.0 - w0[0] - 0.002).abs());
    ok &= worst <= 1e-11;
    notes.push(format!("lars {worst:.1e}"));

    // IoU against rasterized overlap.
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let mut b = || {
            let (x, y) = (rng.int_inclusive(0, 20) as f64, rng.int_inclusive(0, 20) as f64);
            let (w, h) = (rng.int_inclusive(1, 12) as f64, rng.int_inclusive(1, 12) as f64);
            BBox::gt(0, x, y, x + w, y + h).unwrap()
        };
        let (a, c) = (b(), b());
        worst = worst.max((iou(&a, &c) - raster_iou(&a, &c)).abs());
    }
    ok &= worst <= 1e-12;
    notes.push(format!("iou {worst:.1e}"));

    let (fast, t) = within(start.elapsed(), 120.0);
    Ok(verdict(ok && fast, format!("max abs error: {}; {t}", notes.join(", "))))
}

// ---------------------------------------------------------------- trained model

struct Planted {
    test: Vec<FeatureRecord>,
    validation: Vec<FeatureRecord>,
    shifted: Vec<FeatureRecord>,
}

fn planted() -> Result<(FeatureCache, Planted)> {
    let spec = PyramidSpec::desk();
    let train_cache = FeatureCache::new(spec.clone(), D_WK, generate_synthetic(&spec, D_WK, 4000, 0.3, 0.5, 1)?)?;
    let test = generate_synthetic(&spec, D_WK, 1000, 0.3, 0.5, 2)?;
    let validation = generate_synthetic(&spec, D_WK, 1000, 0.3, 0.5, 3)?;
    let shifted = generate(&spec, D_WK, &SynthParams::new(1000, 0.3, 0.5, 4).shifted("shifted", 0.5))?;
    Ok((train_cache, Planted { test, validation, shifted }))
}

struct Trained {
    scorer: Scorer,
    report: EvalReport,
}

fn train_and_report(cache: &FeatureCache, cfg: &TrainConfig, arch: &ArchConfig, data: &Planted) -> Result<Trained> {
    let (model, _) = train::<f32>(cache, cfg, arch)?;
    let scorer = Scorer::Fusion(Box::new(model));
    let gate = scorer.calibrate(&data.validation, TARGET_FPR)?;
    let report = scorer.evaluate(&gate, &data.test)?;
    Ok(Trained { scorer, report })
}

fn directional(main: &Trained, train_time: Duration, data: &Planted, cache: &FeatureCache) -> Result<(Verdict, Verdict)> {
    let start = Instant::now();
    let kgfp = main.report.domains[0].auroc.unwrap_or(f64::NAN);
    let mut margins = Vec::new();
    let mut ok = kgfp >= 0.90;
    for kind in [BaselineKind::Gram, BaselineKind::Knn, BaselineKind::Vim] {
        let b = Scorer::Baseline(Baseline::fit(kind, &cache.records, &BaselineConfig::default())?);
        let a = auroc(&b.score(&data.test)?)?;
        ok &= kgfp - a >= 0.05;
        margins.push(format!("{kind} {a:.4}"));
    }
    let (fast, t) = within(train_time + start.elapsed(), 600.0);
    let d = &main.report.domains[0];
    let (recall, ungated) = (d.person_recall.unwrap_or(f64::NAN), d.ungated_recall);
    Ok((
        verdict(ok && fast, format!("kgfp auroc {kgfp:.4} vs {}; train+baselines {t}", margins.join(", "))),
        verdict(
            recall - ungated >= 0.05,
            format!("person recall {recall:.4} at fpr {:.4} vs ungated {ungated:.4}", d.fpr.unwrap_or(f64::NAN)),
        ),
    ))
}

fn calibration_contract(main: &Trained, data: &Planted) -> Result<Verdict> {
    let gate = &main.report.gate;
    let bound = TARGET_FPR + 1.0 / gate.calibration_safe as f64;
    let val = main.scorer.score(&data.validation)?;
    let achieved = fpr_at(&val, gate.threshold).unwrap_or(f64::NAN);
    let shifted = main.scorer.evaluate(gate, &data.shifted)?;
    let shifted_fpr = shifted.domains[0].fpr.unwrap_or(f64::NAN);
    Ok(verdict(
        achieved <= bound && achieved == gate.achieved_fpr && shifted_fpr.is_finite(),
        format!(
            "tau {:.4}, validation fpr {achieved:.4} <= {bound:.4} ({} safe); shifted-domain fpr {shifted_fpr:.4} (reported)",
            gate.threshold, gate.calibration_safe
        ),
    ))
}

fn ablations(data: &Planted) -> Result<Verdict> {
    let start = Instant::now();
    let spec = PyramidSpec::desk();
    let cache = FeatureCache::new(spec.clone(), D_WK, generate_synthetic(&spec, D_WK, 2000, 0.3, 0.5, 11)?)?;
    let cfg = TrainConfig { epochs: 20, t_max: 20.0, ..TrainConfig::desk() };
    let full = ArchConfig::desk();
    let variants: Vec<(&str, ArchConfig, TrainConfig)> = vec![
        ("full (d=64)", full.clone(), cfg.clone()),
        ("no-attention", full.clone().without_attention(), cfg.clone()),
        ("mlp-head", ArchConfig { head_kind: HeadKind::Mlp, ..full.clone() }, cfg.clone()),
        ("d=256", ArchConfig { embed_dim: 256, ..full.clone() }, cfg.clone()),
        ("adam", full.clone(), TrainConfig { optimizer: OptimizerKind::Adam, ..cfg.clone() }),
    ];
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (name, arch, c) in &variants {
        let t = train_and_report(&cache, c, arch, data)?;
        let d = &t.report.domains[0];
        rows.push(format!("{name} auroc {:.4} recall {:.4}", d.auroc.unwrap_or(f64::NAN), d.person_recall.unwrap_or(f64::NAN)));
        reports.push(t.report);
    }
    let comparable = reports
        .iter()
        .all(|r| r.domains.len() == 1 && r.domains[0].n == data.test.len() && r.domains[0].auroc.is_some_and(f64::is_finite));
    let auc = |i: usize| reports[i].domains[0].auroc.unwrap_or(f64::NAN);
    Ok(verdict(comparable && auc(1) <= auc(0), format!("{}; {:.0}s", rows.join("; "), start.elapsed().as_secs_f64())))
}

fn orthogonality() -> Verdict {
    let start = Instant::now();
    let hits = random_pair_exceedances(100_000, 64, REFERENCE_THRESHOLD, 7);
    let (fast, t) = within(start.elapsed(), 10.0);
    verdict(hits == 0 && fast, format!("{hits} of 100000 cosines above {REFERENCE_THRESHOLD}; {t}"))
}

fn determinism() -> Result<Verdict> {
    let spec = PyramidSpec::desk();
    let cache = FeatureCache::new(spec.clone(), D_WK, generate_synthetic(&spec, D_WK, 300, 0.3, 0.5, 21)?)?;
    let val = generate_synthetic(&spec, D_WK, 200, 0.3, 0.5, 22)?;
    let cfg = TrainConfig { epochs: 3, t_max: 3.0, seed: 5, ..TrainConfig::desk() };
    let baseline_cfg = BaselineConfig::default();
    let run = || -> Result<(Vec<u8>, String, Vec<u8>)> {
        let (model, _) = train::<f32>(&cache, &cfg, &ArchConfig::desk())?;
        let mut ckpt = Vec::new();
        model.save_to(&mut ckpt)?;
        let scorer = Scorer::Fusion(Box::new(model));
        let gate = scorer.calibrate(&val, TARGET_FPR)?;
        let report = scorer.evaluate(&gate, &val)?.to_json()?;
        let mut bsl = Vec::new();
        Baseline::fit(BaselineKind::DinoMlp, &cache.records, &baseline_cfg)?.save_to(&mut bsl)?;
        Ok((ckpt, report, bsl))
    };
    let (a, b) = (run()?, run()?);
    Ok(verdict(
        a == b,
        format!(
            "checkpoint {} bytes, report {} bytes, baseline {} bytes; identical: {}",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            a == b
        ),
    ))
}

fn main() {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut record = |name: &'static str, v: Result<Verdict>| {
        let v = v.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };

    record("gradient integrity", gradient_integrity());
    record("oracle equivalence", oracle_equivalence());
    record("fail-safe orthogonality", Ok(orthogonality()));
    record("determinism", determinism());

    let trained = planted().and_then(|(cache, data)| {
        let start = Instant::now();
        let main = train_and_report(&cache, &TrainConfig::desk(), &ArchConfig::desk(), &data)?;
        Ok((cache, data, main, start.elapsed()))
    });
    match trained {
        Ok((cache, data, main, train_time)) => {
            record("calibration contract", calibration_contract(&main, &data));
            match directional(&main, train_time, &data, &cache) {
                Ok((dir, uplift)) => {
                    record("directional reproduction", Ok(dir));
                    record("selective-gate uplift", Ok(uplift));
                }
                Err(e) => {
                    let msg = e.to_string();
                    record("directional reproduction", Err(e));
                    record("selective-gate uplift", Ok(verdict(false, format!("error: {msg}"))));
                }
            }
            record("ablation harness", ablations(&data));
        }
        Err(e) => {
            let msg = e.to_string();
            for name in ["calibration contract", "directional reproduction", "selective-gate uplift", "ablation harness"] {
                record(name, Ok(verdict(false, format!("training failed: {msg}"))));
            }
        }
    }

    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
