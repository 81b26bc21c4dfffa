//! Per-image safety labels from ground-truth and predicted boxes.
//!
//! Interchange format, one image per line, tab separated:
//!
//! ```text
//! <id>\t<gt boxes>\t<pred boxes>
//! ```
//!
//! Boxes within a field are separated by `;` (an empty field means no boxes).
//! A GT box is `class,x1,y1,x2,y2`; a prediction is `class,x1,y1,x2,y2,score`.
//! Blank lines and lines starting with `#` are skipped.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cache::SafetyLabel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class_id: u32,
}

impl BBox {
    pub fn new(class_id: u32, x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2, score, class_id };
        b.validate()?;
        Ok(b)
    }

    /// Ground-truth box, implicitly certain.
    pub fn gt(class_id: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(class_id, x1, y1, x2, y2, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x2 > self.x1 && self.y2 > self.y1) {
            return Err(Error::Format(format!("degenerate box ({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Format(format!("box score {} outside [0,1]", self.score)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
    pub safety_class_ids: Vec<u32>,
}

impl Default for LabelConfig {
    /// Person is class 0 in the COCO ordering.
    fn default() -> Self {
        Self { iou_threshold: 0.5, confidence_threshold: 0.5, safety_class_ids: vec![0] }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("iou_threshold", self.iou_threshold), ("confidence_threshold", self.confidence_threshold)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside (0,1]")));
            }
        }
        Ok(())
    }

    fn is_safety(&self, b: &BBox) -> bool {
        self.safety_class_ids.contains(&b.class_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub label: SafetyLabel,
    pub gt_count: u32,
    pub matched_count: u32,
    pub pred_count: u32,
}

/// Greedy one-to-one matching of confident safety-class predictions to safety-class GT boxes.
///
/// Predictions are visited by descending score (stable, so equal scores keep input
/// order); each claims the unmatched GT box of highest IoU, lowest index on ties,
/// provided the IoU reaches the threshold.
pub fn match_and_label(gt: &[BBox], preds: &[BBox], cfg: &LabelConfig) -> Outcome {
    let gt: Vec<&BBox> = gt.iter().filter(|b| cfg.is_safety(b)).collect();
    let mut preds: Vec<&BBox> = preds.iter().filter(|b| cfg.is_safety(b) && b.score >= cfg.confidence_threshold).collect();
    preds.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut taken = vec![false; gt.len()];
    let mut matched = 0u32;
    for p in &preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(p, g);
            if v >= cfg.iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            matched += 1;
        }
    }
    let gt_count = gt.len() as u32;
    Outcome {
        label: SafetyLabel::from_counts(gt_count, matched),
        gt_count,
        matched_count: matched,
        pred_count: preds.len() as u32,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBoxes {
    pub id: String,
    pub gt: Vec<BBox>,
    pub preds: Vec<BBox>,
}

fn parse_boxes(field: &str, with_score: bool, line_no: usize) -> Result<Vec<BBox>> {
    let want = if with_score { 6 } else { 5 };
    field
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let parts: Vec<&str> = s.split(',').map(str::trim).collect();
            if parts.len() != want {
                return Err(Error::Format(format!("line {line_no}: box {s:?} needs {want} fields")));
            }
            let class_id =
                parts[0].parse::<u32>().map_err(|_| Error::Format(format!("line {line_no}: bad class id {:?}", parts[0])))?;
            let nums = parts[1..]
                .iter()
                .map(|p| p.parse::<f64>().map_err(|_| Error::Format(format!("line {line_no}: bad number {p:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let score = if with_score { nums[4] } else { 1.0 };
            BBox::new(class_id, nums[0], nums[1], nums[2], nums[3], score)
                .map_err(|e| Error::Format(format!("line {line_no}: {e}")))
        })
        .collect()
}

pub fn parse_interchange(text: &str) -> Result<Vec<ImageBoxes>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!("line {line_no}: expected 3 tab-separated fields, got {}", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(Error::Format(format!("line {line_no}: empty id")));
        }
        out.push(ImageBoxes {
            id: fields[0].to_string(),
            gt: parse_boxes(fields[1], false, line_no)?,
            preds: parse_boxes(fields[2], true, line_no)?,
        });
    }
    Ok(out)
}

pub fn format_interchange(images: &[ImageBoxes]) -> String {
    let mut s = String::new();
    for img in images {
        let gt: Vec<String> = img.gt.iter().map(|b| format!("{},{},{},{},{}", b.class_id, b.x1, b.y1, b.x2, b.y2)).collect();
        let preds: Vec<String> =
            img.preds.iter().map(|b| format!("{},{},{},{},{},{}", b.class_id, b.x1, b.y1, b.x2, b.y2, b.score)).collect();
        let _ = writeln!(s, "{}\t{}\t{}", img.id, gt.join(";"), preds.join(";"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::gt(0, x1, y1, x2, y2).unwrap()
    }

    fn pred(x1: f64, y1: f64, x2: f64, y2: f64, s: f64) -> BBox {
        BBox::new(0, x1, y1, x2, y2, s).unwrap()
    }

    /// Counts unit cells covered by both boxes on an integer grid.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let inside = |bx: &BBox, x: i64, y: i64| {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            cx > bx.x1 && cx < bx.x2 && cy > bx.y1 && cy < bx.y2
        };
        let (mut inter, mut union) = (0u32, 0u32);
        for y in -2..40 {
            for x in -2..40 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u32;
                union += (ia || ib) as u32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = gt(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &gt(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = gt(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - raster_iou(&a, &b)).abs() < 1e-12);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::gt(0, 1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0, 0.0, 0.0, 1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn label_examples() {
        let cfg = LabelConfig::default();
        let p = pred(0.0, 0.0, 10.0, 10.0, 0.9);
        let o = match_and_label(&[], &[p, p], &cfg);
        assert_eq!((o.label, o.gt_count, o.matched_count, o.pred_count), (SafetyLabel::Safe, 0, 0, 2));

        let o = match_and_label(&[gt(0.0, 0.0, 10.0, 10.0)], &[p], &cfg);
        assert_eq!((o.label, o.gt_count, o.matched_count, o.pred_count), (SafetyLabel::Safe, 1, 1, 1));

        // Two heavily overlapping GT boxes, one prediction covering both.
        let g = [gt(0.0, 0.0, 10.0, 10.0), gt(0.0, 1.0, 10.0, 11.0)];
        let p = pred(0.0, 0.5, 10.0, 10.5, 0.9);
        assert!(iou(&p, &g[0]) >= 0.5 && iou(&p, &g[1]) >= 0.5);
        let o = match_and_label(&g, &[p], &cfg);
        assert_eq!((o.label, o.gt_count, o.matched_count, o.pred_count), (SafetyLabel::Unsafe, 2, 1, 1));
        assert_eq!(max_matching(&g, &[p], &cfg), 1);
    }

    #[test]
    fn filters_class_and_confidence() {
        let cfg = LabelConfig::default();
        let g = [gt(0.0, 0.0, 10.0, 10.0), BBox::gt(2, 0.0, 0.0, 10.0, 10.0).unwrap()];
        let preds = [pred(0.0, 0.0, 10.0, 10.0, 0.4), BBox::new(2, 0.0, 0.0, 10.0, 10.0, 0.9).unwrap()];
        let o = match_and_label(&g, &preds, &cfg);
        assert_eq!((o.label, o.gt_count, o.matched_count, o.pred_count), (SafetyLabel::Unsafe, 1, 0, 0));
    }

    #[test]
    fn iou_ties_go_to_lower_index() {
        let cfg = LabelConfig::default();
        let g = [gt(0.0, 0.0, 10.0, 10.0), gt(0.0, 0.0, 10.0, 10.0)];
        let o = match_and_label(&g, &[pred(0.0, 0.0, 10.0, 10.0, 0.9)], &cfg);
        assert_eq!(o.matched_count, 1);
    }

    #[test]
    fn interchange_roundtrip() {
        let text = "# header\nimg1\t0,0,0,10,10;1,2,2,4,4\t0,0,0,10,10,0.9\nimg2\t\t\n";
        let imgs = parse_interchange(text).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].gt.len(), 2);
        assert_eq!(imgs[0].preds[0].score, 0.9);
        assert!(imgs[1].gt.is_empty() && imgs[1].preds.is_empty());
        assert_eq!(parse_interchange(&format_interchange(&imgs)).unwrap(), imgs);
        assert!(parse_interchange("a\t0,1,1,0,0\t\n").is_err());
        assert!(parse_interchange("a\t0,0,0,1\t\n").is_err());
        assert!(parse_interchange("a\t\n").is_err());
    }

    /// Maximum bipartite matching by exhaustive search over assignments.
    fn max_matching(gt: &[BBox], preds: &[BBox], cfg: &LabelConfig) -> u32 {
        let gt: Vec<&BBox> = gt.iter().filter(|b| cfg.is_safety(b)).collect();
        let preds: Vec<&BBox> = preds.iter().filter(|b| cfg.is_safety(b) && b.score >= cfg.confidence_threshold).collect();
        fn go(i: usize, preds: &[&BBox], gt: &[&BBox], used: &mut Vec<bool>, thr: f64) -> u32 {
            if i == preds.len() {
                return 0;
            }
            let mut best = go(i + 1, preds, gt, used, thr);
            for j in 0..gt.len() {
                if !used[j] && iou(preds[i], gt[j]) >= thr {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, preds, gt, used, thr));
                    used[j] = false;
                }
            }
            best
        }
        go(0, &preds, &gt, &mut vec![false; gt.len()], cfg.iou_threshold)
    }

    fn arb_box(with_score: bool) -> impl Strategy<Value = BBox> {
        (0u32..2, 0i32..20, 0i32..20, 1i32..12, 1i32..12, 0.0f64..=1.0).prop_map(move |(c, x, y, w, h, s)| {
            BBox::new(c, x as f64, y as f64, (x + w) as f64, (y + h) as f64, if with_score { s } else { 1.0 }).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_matches_raster(a in arb_box(false), b in arb_box(false)) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert!((iou(&a, &b) - raster_iou(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn greedy_bounded_by_max_matching(
            g in proptest::collection::vec(arb_box(false), 0..=6),
            p in proptest::collection::vec(arb_box(true), 0..=6),
        ) {
            let cfg = LabelConfig::default();
            let o = match_and_label(&g, &p, &cfg);
            let best = max_matching(&g, &p, &cfg);
            prop_assert!(o.matched_count <= best);
            prop_assert!(o.matched_count <= o.gt_count && o.matched_count <= o.pred_count);
            if o.label == SafetyLabel::Safe {
                prop_assert_eq!(best, o.gt_count);
            }
        }
    }
}
