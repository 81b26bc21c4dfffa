//! Threshold calibration, gating, and the evaluation metrics.
//!
//! Every scorer is oriented so that a higher score means "safer". The gate
//! accepts an image iff `score >= tau`. FPR is the fraction of safe images the
//! gate rejects; TPR is the fraction of unsafe images it rejects.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cache::{FeatureRecord, SafetyLabel};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Threshold reported for the full-size model; not expected to carry over to other scales.
pub const REFERENCE_THRESHOLD: f64 = 0.843;
pub const DEFAULT_TARGET_FPR: f64 = 0.05;
/// Slack for `target * n` landing a hair below an integer in floating point.
const COUNT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub id: String,
    pub score: f64,
    pub label: SafetyLabel,
    pub gt_count: u32,
    pub matched_count: u32,
    pub pred_count: u32,
    pub domain: String,
}

impl ScoredRecord {
    pub fn new(record: &FeatureRecord, score: f64) -> Self {
        Self {
            id: record.id.clone(),
            score,
            label: record.label,
            gt_count: record.gt_count,
            matched_count: record.matched_count,
            pred_count: record.pred_count,
            domain: record.domain.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedGate {
    pub threshold: f64,
    pub target_fpr: f64,
    pub calibration_size: usize,
    pub calibration_safe: usize,
    /// FPR on the calibration set itself.
    pub achieved_fpr: f64,
}

impl CalibratedGate {
    pub fn decide(&self, score: f64) -> Decision {
        gate(self.threshold, score)
    }
}

/// Accepts iff `score >= tau`; NaN is always rejected.
pub fn gate(tau: f64, score: f64) -> Decision {
    if score >= tau {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

fn check_scores(scored: &[ScoredRecord]) -> Result<()> {
    match scored.iter().find(|r| !r.score.is_finite()) {
        Some(r) => Err(Error::NonFinite(format!("score of record {:?}", r.id))),
        None => Ok(()),
    }
}

fn safe_scores(scored: &[ScoredRecord]) -> Vec<f64> {
    let mut s: Vec<f64> = scored.iter().filter(|r| !r.label.is_unsafe()).map(|r| r.score).collect();
    s.sort_by(f64::total_cmp);
    s
}

fn count_below(sorted: &[f64], tau: f64) -> usize {
    sorted.partition_point(|&v| v < tau)
}

/// Largest realized score `tau` whose rejected share of safe records is at most `target_fpr`.
pub fn calibrate(scored: &[ScoredRecord], target_fpr: f64) -> Result<CalibratedGate> {
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::InvalidArgument(format!("target_fpr {target_fpr} outside [0,1]")));
    }
    check_scores(scored)?;
    let safe = safe_scores(scored);
    if safe.is_empty() {
        return Err(Error::InsufficientData("calibration needs at least one safe record".into()));
    }
    let allowed = (target_fpr * safe.len() as f64 + COUNT_EPS).floor() as usize;
    let threshold =
        scored.iter().map(|r| r.score).filter(|&t| count_below(&safe, t) <= allowed).fold(f64::NEG_INFINITY, f64::max);
    Ok(CalibratedGate {
        threshold,
        target_fpr,
        calibration_size: scored.len(),
        calibration_safe: safe.len(),
        achieved_fpr: count_below(&safe, threshold) as f64 / safe.len() as f64,
    })
}

/// Share of safe records rejected at `tau`, or `None` without safe records.
pub fn fpr_at(scored: &[ScoredRecord], tau: f64) -> Option<f64> {
    let safe: Vec<_> = scored.iter().filter(|r| !r.label.is_unsafe()).collect();
    (!safe.is_empty()).then(|| safe.iter().filter(|r| gate(tau, r.score) == Decision::Reject).count() as f64 / safe.len() as f64)
}

/// Share of unsafe records rejected at `tau`, or `None` without unsafe records.
pub fn tpr_at(scored: &[ScoredRecord], tau: f64) -> Option<f64> {
    let bad: Vec<_> = scored.iter().filter(|r| r.label.is_unsafe()).collect();
    (!bad.is_empty()).then(|| bad.iter().filter(|r| gate(tau, r.score) == Decision::Reject).count() as f64 / bad.len() as f64)
}

/// TPR at the threshold calibrated on `scored` itself.
pub fn tpr_at_fpr(scored: &[ScoredRecord], target_fpr: f64) -> Result<f64> {
    let g = calibrate(scored, target_fpr)?;
    tpr_at(scored, g.threshold).ok_or_else(|| Error::InsufficientData("no unsafe records".into()))
}

fn class_counts(scored: &[ScoredRecord]) -> (usize, usize) {
    let unsafe_n = scored.iter().filter(|r| r.label.is_unsafe()).count();
    (scored.len() - unsafe_n, unsafe_n)
}

/// Rank-based AUROC with unsafe as the positive class and lower safety scores
/// counted as more unsafe; ties earn half credit.
pub fn auroc(scored: &[ScoredRecord]) -> Result<f64> {
    check_scores(scored)?;
    let (n_safe, n_unsafe) = class_counts(scored);
    if n_safe == 0 || n_unsafe == 0 {
        return Err(Error::InsufficientData("AUROC needs both labels".into()));
    }
    let mut order: Vec<&ScoredRecord> = scored.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Mann-Whitney: for every unsafe record count safe records with a strictly higher score.
    let mut wins = 0.0;
    let mut i = 0;
    let mut safe_seen = 0usize;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].score == order[i].score {
            j += 1;
        }
        let group = &order[i..j];
        let g_unsafe = group.iter().filter(|r| r.label.is_unsafe()).count() as f64;
        let g_safe = group.len() as f64 - g_unsafe;
        let safe_above = (n_safe - safe_seen) as f64 - g_safe;
        wins += g_unsafe * (safe_above + 0.5 * g_safe);
        safe_seen += g_safe as usize;
        i = j;
    }
    Ok(wins / (n_safe as f64 * n_unsafe as f64))
}

/// ROC points `(fpr, tpr)` for every distinct threshold, from accept-all to reject-all.
pub fn roc(scored: &[ScoredRecord]) -> Result<Vec<(f64, f64)>> {
    check_scores(scored)?;
    let (n_safe, n_unsafe) = class_counts(scored);
    if n_safe == 0 || n_unsafe == 0 {
        return Err(Error::InsufficientData("ROC needs both labels".into()));
    }
    let mut order: Vec<&ScoredRecord> = scored.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut pts = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = order[i].score;
        while i < order.len() && order[i].score == s {
            if order[i].label.is_unsafe() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / n_safe as f64, tp as f64 / n_unsafe as f64));
    }
    Ok(pts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptedStats {
    /// `None` when nothing was accepted.
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub accepted_fraction: f64,
}

/// Detector recall and precision pooled over the images accepted at `tau`.
pub fn accepted_stats(scored: &[ScoredRecord], tau: f64) -> AcceptedStats {
    let acc: Vec<&ScoredRecord> = scored.iter().filter(|r| gate(tau, r.score) == Decision::Accept).collect();
    if acc.is_empty() {
        return AcceptedStats { recall: None, precision: None, accepted_fraction: 0.0 };
    }
    let sum = |f: fn(&ScoredRecord) -> u32| acc.iter().map(|r| f(r) as f64).sum::<f64>();
    let (m, g, p) = (sum(|r| r.matched_count), sum(|r| r.gt_count), sum(|r| r.pred_count));
    AcceptedStats {
        recall: Some(if g == 0.0 { 1.0 } else { m / g }),
        precision: Some(if p == 0.0 { 1.0 } else { m / p }),
        accepted_fraction: acc.len() as f64 / scored.len().max(1) as f64,
    }
}

/// Person recall and precision among images accepted at the threshold calibrated on `scored`.
pub fn person_recall_at_fpr(scored: &[ScoredRecord], target_fpr: f64) -> Result<AcceptedStats> {
    let g = calibrate(scored, target_fpr)?;
    Ok(accepted_stats(scored, g.threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fpr: f64,
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    pub accepted_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecPrecCurve {
    /// One point per achieved FPR, using the calibration rule's threshold for that FPR.
    pub points: Vec<CurvePoint>,
    /// Gate disabled; equals the ungated detector metrics.
    pub accept_all: CurvePoint,
    pub rec_auc: f64,
    pub prec_auc: f64,
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    if let Some(&(x, y)) = points.last() {
        area += (1.0 - x) * y;
    }
    area
}

/// Recall/precision among accepted images as a function of achieved FPR,
/// integrated over FPR in [0, 1] with the last value held constant up to 1.
pub fn rec_prec_curve(scored: &[ScoredRecord]) -> Result<RecPrecCurve> {
    check_scores(scored)?;
    let safe = safe_scores(scored);
    if safe.is_empty() {
        return Err(Error::InsufficientData("rec/prec curve needs at least one safe record".into()));
    }
    let mut all: Vec<f64> = scored.iter().map(|r| r.score).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    // For each achieved rejected-safe count keep the largest threshold producing it.
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for &t in &all {
        best.insert(count_below(&safe, t), t);
    }
    let point = |tau: f64, fpr: f64| {
        let st = accepted_stats(scored, tau);
        CurvePoint {
            fpr,
            threshold: tau,
            recall: st.recall.unwrap_or(f64::NAN),
            precision: st.precision.unwrap_or(f64::NAN),
            accepted_fraction: st.accepted_fraction,
        }
    };
    let points: Vec<CurvePoint> = best.iter().map(|(&k, &t)| point(t, k as f64 / safe.len() as f64)).collect();
    let rec_auc = trapezoid(&points.iter().map(|p| (p.fpr, p.recall)).collect::<Vec<_>>());
    let prec_auc = trapezoid(&points.iter().map(|p| (p.fpr, p.precision)).collect::<Vec<_>>());
    Ok(RecPrecCurve { points, accept_all: point(f64::NEG_INFINITY, 0.0), rec_auc, prec_auc })
}

pub fn rec_prec_auc(scored: &[ScoredRecord]) -> Result<(f64, f64)> {
    let c = rec_prec_curve(scored)?;
    Ok((c.rec_auc, c.prec_auc))
}

/// Number of pairs of independent standard normal vectors in `dim` dimensions
/// whose cosine similarity exceeds `threshold`.
pub fn random_pair_exceedances(pairs: usize, dim: usize, threshold: f64, seed: u64) -> usize {
    let mut rng = SeededRng::new(seed);
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let mut hits = 0;
    for _ in 0..pairs {
        a.iter_mut().for_each(|x| *x = rng.normal());
        b.iter_mut().for_each(|x| *x = rng.normal());
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if dot / (na * nb) > threshold {
            hits += 1;
        }
    }
    hits
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub n: usize,
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub auroc: Option<f64>,
    /// Unsafe images rejected at the carried threshold.
    pub tpr: Option<f64>,
    /// Safe images rejected at the carried threshold.
    pub fpr: Option<f64>,
    pub person_recall: Option<f64>,
    pub person_precision: Option<f64>,
    pub accepted_fraction: f64,
    pub ungated_recall: f64,
    pub ungated_precision: f64,
    pub rec_auc: Option<f64>,
    pub prec_auc: Option<f64>,
    pub roc: Vec<(f64, f64)>,
    pub curve: Vec<CurvePoint>,
}

impl DomainReport {
    /// Metrics for one domain at a fixed, externally calibrated threshold.
    pub fn build(domain: &str, scored: &[ScoredRecord], tau: f64) -> Result<Self> {
        check_scores(scored)?;
        if scored.is_empty() {
            return Err(Error::InsufficientData(format!("domain {domain:?} has no records")));
        }
        let (n_safe, n_unsafe) = class_counts(scored);
        let both = n_safe > 0 && n_unsafe > 0;
        let gated = accepted_stats(scored, tau);
        let ungated = accepted_stats(scored, f64::NEG_INFINITY);
        let curve = if n_safe > 0 { Some(rec_prec_curve(scored)?) } else { None };
        Ok(Self {
            domain: domain.to_string(),
            n: scored.len(),
            n_safe,
            n_unsafe,
            auroc: if both { Some(auroc(scored)?) } else { None },
            tpr: tpr_at(scored, tau),
            fpr: fpr_at(scored, tau),
            person_recall: gated.recall,
            person_precision: gated.precision,
            accepted_fraction: gated.accepted_fraction,
            ungated_recall: ungated.recall.unwrap_or(f64::NAN),
            ungated_precision: ungated.precision.unwrap_or(f64::NAN),
            rec_auc: curve.as_ref().map(|c| c.rec_auc),
            prec_auc: curve.as_ref().map(|c| c.prec_auc),
            roc: if both { roc(scored)? } else { Vec::new() },
            curve: curve.map(|c| c.points).unwrap_or_default(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub gate: CalibratedGate,
    pub domains: Vec<DomainReport>,
}

impl EvalReport {
    /// One sub-report per domain tag, in order of first appearance, all at `gate`'s threshold.
    pub fn build(scorer: &str, gate: &CalibratedGate, scored: &[ScoredRecord]) -> Result<Self> {
        let mut order: Vec<&str> = Vec::new();
        for r in scored {
            if !order.contains(&r.domain.as_str()) {
                order.push(&r.domain);
            }
        }
        let domains = order
            .iter()
            .map(|d| {
                let subset: Vec<ScoredRecord> = scored.iter().filter(|r| r.domain == *d).cloned().collect();
                DomainReport::build(d, &subset, gate.threshold)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scorer: scorer.to_string(), gate: gate.clone(), domains })
    }

    pub fn domain(&self, name: &str) -> Option<&DomainReport> {
        self.domains.iter().find(|d| d.domain == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Flat `domain,fpr,threshold,recall,precision,accepted_fraction` table.
    pub fn plot_table(&self) -> String {
        let mut s = String::from("scorer,domain,fpr,threshold,recall,precision,accepted_fraction\n");
        for d in &self.domains {
            for p in &d.curve {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    self.scorer, d.domain, p.fpr, p.threshold, p.recall, p.precision, p.accepted_fraction
                );
            }
        }
        s
    }
}
