//! IoU matching, average precision, PR curves and F1 summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::PixelBox;

/// Confidence of the fixed deployment operating point.
pub const OPERATING_CONFIDENCE: f64 = 0.40;
/// IoU threshold of the headline metric.
pub const PRIMARY_IOU: f64 = 0.01;

/// Half-open box: covers `x_min <= x < x_max`, `y_min <= y < y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        ensure!(
            [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) && x_min <= x_max && y_min <= y_max,
            Error::Parameter(format!("malformed box ({x_min},{y_min},{x_max},{y_max})"))
        );
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    /// The half-open box covering an inclusive pixel rectangle.
    pub fn from_pixels(b: &PixelBox) -> Self {
        BBox {
            x_min: b.x_min as f64,
            y_min: b.y_min as f64,
            x_max: (b.x_max + 1) as f64,
            y_max: (b.y_max + 1) as f64,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// Intersection over union; zero-area boxes score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (aa + ab - inter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledDetection {
    pub confidence: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// In descending confidence order.
    pub labeled: Vec<LabeledDetection>,
    pub false_negatives: usize,
    pub total_gt: usize,
}

/// Greedy matching by descending confidence (stable for ties). Each
/// detection takes the unmatched ground truth of its image with the highest
/// IoU, if that IoU is positive and at least `iou_threshold`; ties go to
/// the lower ground-truth index.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut used = vec![false; gts.len()];
    let mut labeled = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v > 0.0 && v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        labeled.push(LabeledDetection {
            confidence: d.confidence,
            true_positive: best.is_some(),
        });
    }
    MatchResult {
        false_negatives: used.iter().filter(|u| !**u).count(),
        total_gt: gts.len(),
        labeled,
    }
}

/// One point of the PR sweep: everything with confidence `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

fn sorted(labeled: &[LabeledDetection]) -> Vec<LabeledDetection> {
    let mut v = labeled.to_vec();
    v.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    v
}

/// PR points at every distinct confidence, in descending threshold order
/// (so recall is non-decreasing).
pub fn pr_curve(labeled: &[LabeledDetection], total_gt: usize) -> Result<Vec<PrPoint>> {
    ensure!(total_gt > 0, Error::Data("no ground truth".into()));
    let v = sorted(labeled);
    let mut out = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    for (i, d) in v.iter().enumerate() {
        n += 1;
        tp += d.true_positive as usize;
        if i + 1 == v.len() || v[i + 1].confidence != d.confidence {
            out.push(PrPoint {
                recall: tp as f64 / total_gt as f64,
                precision: tp as f64 / n as f64,
                threshold: d.confidence,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recalls 0, 0.01, ..., 1.
    Coco101,
}

fn envelope(curve: &[PrPoint]) -> Vec<f64> {
    let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    env
}

pub fn average_precision(labeled: &[LabeledDetection], total_gt: usize) -> Result<f64> {
    average_precision_with(labeled, total_gt, Interpolation::AllPoint)
}

pub fn average_precision_with(labeled: &[LabeledDetection], total_gt: usize, mode: Interpolation) -> Result<f64> {
    let curve = pr_curve(labeled, total_gt)?;
    let env = envelope(&curve);
    Ok(match mode {
        Interpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (p, e) in curve.iter().zip(&env) {
                ap += (p.recall - prev) * e;
                prev = p.recall;
            }
            ap
        }
        Interpolation::Coco101 => {
            (0..=100)
                .map(|k| {
                    let r = k as f64 / 100.0;
                    curve.iter().position(|p| p.recall >= r - 1e-12).map_or(0.0, |i| env[i])
                })
                .sum::<f64>()
                / 101.0
        }
    })
}

/// `2pr / (p + r)`, with 0/0 read as 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn operating_point(labeled: &[LabeledDetection], total_gt: usize, threshold: f64) -> Result<OperatingPoint> {
    ensure!(total_gt > 0, Error::Data("no ground truth".into()));
    let passing = labeled.iter().filter(|d| d.confidence >= threshold);
    let (n, tp) = passing.fold((0usize, 0usize), |(n, tp), d| (n + 1, tp + d.true_positive as usize));
    let precision = if n == 0 { 0.0 } else { tp as f64 / n as f64 };
    let recall = tp as f64 / total_gt as f64;
    Ok(OperatingPoint {
        threshold,
        precision,
        recall,
        f1: f1(precision, recall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestF1 {
    pub f1: f64,
    /// Lowest confidence threshold reaching `f1`; 1.0 when there are no
    /// detections.
    pub threshold: f64,
}

pub fn best_f1(labeled: &[LabeledDetection], total_gt: usize) -> Result<BestF1> {
    let curve = pr_curve(labeled, total_gt)?;
    let mut best = BestF1 { f1: 0.0, threshold: 1.0 };
    // Thresholds descend along the curve, so `>=` keeps the lowest.
    for p in &curve {
        let f = f1(p.precision, p.recall);
        if f >= best.f1 {
            best = BestF1 { f1: f, threshold: p.threshold };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Threshold for the PR curve, best F1 and operating point.
    pub primary_iou: f64,
    pub operating_confidence: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.01, 0.5],
            primary_iou: PRIMARY_IOU,
            operating_confidence: OPERATING_CONFIDENCE,
            interpolation: Interpolation::AllPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by the IoU threshold formatted with two decimals.
    pub ap_at_iou: BTreeMap<String, f64>,
    pub primary_iou: f64,
    /// AP at the primary IoU (single class, so mAP = AP).
    pub map: f64,
    pub pr_curve: Vec<PrPoint>,
    pub best_f1: BestF1,
    pub operating_point: OperatingPoint,
    pub images: usize,
    pub ground_truth: usize,
    pub detections: usize,
}

pub fn iou_key(t: f64) -> String {
    format!("{t:.2}")
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig) -> Result<EvalReport> {
    ensure!(!gts.is_empty(), Error::Data("no ground truth".into()));
    let mut ap_at_iou = BTreeMap::new();
    for &t in cfg.iou_thresholds.iter().chain(std::iter::once(&cfg.primary_iou)) {
        let m = match_detections(dets, gts, t);
        ap_at_iou.insert(iou_key(t), average_precision_with(&m.labeled, m.total_gt, cfg.interpolation)?);
    }
    let m = match_detections(dets, gts, cfg.primary_iou);
    let mut images: Vec<&str> = gts.iter().map(|g| g.image_id.as_str()).chain(dets.iter().map(|d| d.image_id.as_str())).collect();
    images.sort_unstable();
    images.dedup();
    Ok(EvalReport {
        map: ap_at_iou[&iou_key(cfg.primary_iou)],
        ap_at_iou,
        primary_iou: cfg.primary_iou,
        pr_curve: pr_curve(&m.labeled, m.total_gt)?,
        best_f1: best_f1(&m.labeled, m.total_gt)?,
        operating_point: operating_point(&m.labeled, m.total_gt, cfg.operating_confidence)?,
        images: images.len(),
        ground_truth: gts.len(),
        detections: dets.len(),
    })
}

impl EvalReport {
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision,threshold\n");
        for p in &self.pr_curve {
            s.push_str(&format!("{},{},{}\n", p.recall, p.precision, p.threshold));
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>_pr.csv` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}_pr.csv"));
        std::fs::write(&csv, self.pr_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// One row of the per-arm comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arm: String,
    pub map: f64,
    pub best_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ComparisonRow {
    pub fn from_report(arm: &str, r: &EvalReport) -> Self {
        ComparisonRow {
            arm: arm.to_string(),
            map: r.map,
            best_f1: r.best_f1.f1,
            precision: r.operating_point.precision,
            recall: r.operating_point.recall,
            f1: r.operating_point.f1,
        }
    }
}

pub const COMPARISON_COLUMNS: [&str; 5] = ["mAP@0.01", "Best F1", "Precision", "Recall", "F-1"];

/// Markdown table, values in percent.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!("| Arm | {} |\n|---|---|---|---|---|---|\n", COMPARISON_COLUMNS.join(" | "));
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.1}% | {:.1}% | {:.1}% | {:.1}% | {:.1}% |\n",
            r.arm,
            100.0 * r.map,
            100.0 * r.best_f1,
            100.0 * r.precision,
            100.0 * r.recall,
            100.0 * r.f1
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn lab(v: &[(f64, bool)]) -> Vec<LabeledDetection> {
        v.iter()
            .map(|&(confidence, true_positive)| LabeledDetection { confidence, true_positive })
            .collect()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 4., 4.), &b(0., 0., 4., 4.)), 1.0);
        assert_eq!(iou(&b(0., 0., 4., 4.), &b(5., 5., 8., 8.)), 0.0);
        assert!((iou(&b(0., 0., 10., 10.), &b(5., 0., 15., 10.)) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(iou(&b(2., 2., 2., 2.), &b(2., 2., 2., 2.)), 0.0);
        assert!(BBox::new(3.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn matching_examples() {
        let gt = vec![GroundTruthBox {
            image_id: "a".into(),
            bbox: b(0., 0., 10., 10.),
        }];
        let det = |c: f64, x1: f64| Detection {
            image_id: "a".into(),
            bbox: b(0., 0., x1, 10.),
            confidence: c,
        };
        let m = match_detections(&[det(0.5, 8.0)], &gt, 0.5);
        assert_eq!((m.labeled[0].true_positive, m.false_negatives), (true, 0));
        let m = match_detections(&[], &gt, 0.5);
        assert_eq!(m.false_negatives, 1);
        // IoU 0.6 at 0.9 and 0.7 at 0.8: the first in confidence order wins.
        let m = match_detections(&[det(0.8, 7.0), det(0.9, 6.0)], &gt, 0.5);
        assert_eq!(m.labeled, lab(&[(0.9, true), (0.8, false)]));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&lab(&[(0.9, true), (0.5, true)]), 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
        let v = lab(&[(0.9, true), (0.8, false), (0.7, true)]);
        assert!((average_precision(&v, 2).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!(matches!(average_precision(&v, 0), Err(Error::Data(_))));
        assert_eq!(best_f1(&v, 2).unwrap(), BestF1 { f1: 0.8, threshold: 0.7 });
    }

    #[test]
    fn f1_examples() {
        assert_eq!(best_f1(&lab(&[(0.6, true)]), 1).unwrap(), BestF1 { f1: 1.0, threshold: 0.6 });
        assert_eq!(best_f1(&lab(&[(0.6, false), (0.3, false)]), 1).unwrap().f1, 0.0);
        let all = operating_point(&lab(&[(0.9, true), (0.5, true)]), 2, 0.4).unwrap();
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
        let none = operating_point(&lab(&[(0.3, true)]), 2, 0.4).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let mut v = vec![(0.9, true); 6];
        v.extend([(0.5, false); 2]);
        v.push((0.1, true));
        let op = operating_point(&lab(&v), 10, 0.4).unwrap();
        assert_eq!((op.precision, op.recall), (0.75, 0.6));
        assert!((op.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_has_expected_columns() {
        let t = comparison_table(&[]);
        assert!(t.starts_with("| Arm | mAP@0.01 | Best F1 | Precision | Recall | F-1 |"));
    }
}
