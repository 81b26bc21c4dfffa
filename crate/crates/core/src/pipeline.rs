//! Scoring, calibration and reporting shared by the command line and the test suites.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::Baseline;
use crate::cache::FeatureRecord;
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::metrics::{calibrate, CalibratedGate, EvalReport, ScoredRecord};

pub const INFERENCE_BATCH: usize = 64;

pub enum Scorer {
    Fusion(Box<FusionModel<f32>>),
    Baseline(Baseline),
}

impl Scorer {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Fusion(_) => "kgfp",
            Scorer::Baseline(b) => b.kind().name(),
        }
    }

    /// Safety scores for `records`, higher is safer; any non-finite score is an error.
    pub fn score(&self, records: &[FeatureRecord]) -> Result<Vec<ScoredRecord>> {
        let raw: Vec<f64> = match self {
            Scorer::Fusion(m) => m.predict(records, INFERENCE_BATCH)?.iter().map(|p| p.s_safety as f64).collect(),
            Scorer::Baseline(b) => b.score(records)?,
        };
        records
            .iter()
            .zip(raw)
            .map(|(r, s)| {
                if s.is_finite() {
                    Ok(ScoredRecord::new(r, s))
                } else {
                    Err(Error::NonFinite(format!("{} score for record {:?}", self.name(), r.id)))
                }
            })
            .collect()
    }

    pub fn calibrate(&self, validation: &[FeatureRecord], target_fpr: f64) -> Result<CalibratedGate> {
        calibrate(&self.score(validation)?, target_fpr)
    }

    /// Report over `records` (any mix of domains) at the given gate.
    pub fn evaluate(&self, gate: &CalibratedGate, records: &[FeatureRecord]) -> Result<EvalReport> {
        EvalReport::build(self.name(), gate, &self.score(records)?)
    }
}

/// Gate threshold as stored on disk, tagged with the scorer it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateFile {
    pub scorer: String,
    pub gate: CalibratedGate,
}

/// One line per scorer and domain, in the layout of the usual comparison table.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "method,domain,n,auroc,tpr_at_fpr,fpr,person_recall,person_precision,accepted_fraction,ungated_recall,ungated_precision,rec_auc,prec_auc\n",
    );
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    for r in reports {
        for d in &r.domains {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.scorer,
                d.domain,
                d.n,
                opt(d.auroc),
                opt(d.tpr),
                opt(d.fpr),
                opt(d.person_recall),
                opt(d.person_precision),
                d.accepted_fraction,
                d.ungated_recall,
                d.ungated_precision,
                opt(d.rec_auc),
                opt(d.prec_auc),
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{BaselineConfig, BaselineKind};
    use crate::cache::PyramidSpec;
    use crate::synth::{generate, SynthParams};

    #[test]
    fn baseline_scorer_reports_every_domain() {
        let spec = PyramidSpec::desk();
        let train = generate(&spec, 8, &SynthParams::new(200, 0.3, 0.2, 1)).unwrap();
        let mut eval = generate(&spec, 8, &SynthParams::new(100, 0.3, 0.2, 2)).unwrap();
        eval.extend(generate(&spec, 8, &SynthParams::new(100, 0.3, 0.2, 3).shifted("fog", 0.5)).unwrap());
        let scorer = Scorer::Baseline(Baseline::fit(BaselineKind::Knn, &train, &BaselineConfig::default()).unwrap());
        let gate = scorer.calibrate(&train, 0.05).unwrap();
        let rep = scorer.evaluate(&gate, &eval).unwrap();
        assert_eq!(rep.domains.len(), 2);
        let table = summary_table(&[rep]);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(2).unwrap().starts_with("knn,fog,100,"));
    }
}
