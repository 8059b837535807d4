//! Binary classification scores and detection AP/mAP.
//!
//! Conventions: a precision, recall or F1 whose denominator is zero is 0.
//! AP integrates the all-point monotone precision envelope over recall,
//! with greedy one-to-one matching of detections to ground truths.

use crate::supervision::Rect;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("predictions ({0}) and labels ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("labels must be 0 or 1, found {0}")]
    NonBinary(u8),
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
}

/// Per-class confusion counts of a binary problem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: [usize; 2],
    pub fp: [usize; 2],
    pub fn_: [usize; 2],
    pub n: usize,
}

impl ConfusionCounts {
    pub fn from_pairs(predictions: &[u8], labels: &[u8]) -> Result<Self, MetricsError> {
        if predictions.len() != labels.len() {
            return Err(MetricsError::LengthMismatch(predictions.len(), labels.len()));
        }
        if predictions.is_empty() {
            return Err(MetricsError::Empty("classification_report"));
        }
        let mut c = Self {
            n: labels.len(),
            ..Self::default()
        };
        for (&p, &y) in predictions.iter().zip(labels) {
            if p > 1 {
                return Err(MetricsError::NonBinary(p));
            }
            if y > 1 {
                return Err(MetricsError::NonBinary(y));
            }
            let (p, y) = (p as usize, y as usize);
            if p == y {
                c.tp[y] += 1;
            } else {
                c.fp[p] += 1;
                c.fn_[y] += 1;
            }
        }
        Ok(c)
    }

    pub fn support(&self, class: usize) -> usize {
        self.tp[class] + self.fn_[class]
    }

    pub fn correct(&self) -> usize {
        self.tp[0] + self.tp[1]
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Accuracy with macro- and support-weighted precision/recall/F1, plus
/// optional detection AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub per_class: [ClassScores; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_ap: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "accuracy,macro_precision,macro_recall,macro_f1,weighted_precision,weighted_recall,weighted_f1";

    /// Values in [`Self::CSV_HEADER`] order.
    pub fn csv_values(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.weighted_precision,
            self.weighted_recall,
            self.weighted_f1,
        ]
    }

    pub fn to_csv(&self) -> String {
        let row: Vec<String> = self.csv_values().iter().map(|v| v.to_string()).collect();
        format!("{}\n{}\n", Self::CSV_HEADER, row.join(","))
    }

    pub fn with_ap(mut self, per_class_ap: BTreeMap<String, f64>) -> Result<Self, MetricsError> {
        self.map = Some(mean_ap(&per_class_ap)?);
        self.per_class_ap = Some(per_class_ap);
        Ok(self)
    }
}

pub fn classification_report(predictions: &[u8], labels: &[u8]) -> Result<MetricsReport, MetricsError> {
    let c = ConfusionCounts::from_pairs(predictions, labels)?;
    let per_class = [0, 1].map(|k| {
        let precision = ratio(c.tp[k], c.tp[k] + c.fp[k]);
        let recall = ratio(c.tp[k], c.tp[k] + c.fn_[k]);
        ClassScores {
            precision,
            recall,
            f1: f1(precision, recall),
            support: c.support(k),
        }
    });
    let n = c.n as f64;
    let macro_of = |f: fn(&ClassScores) -> f64| (f(&per_class[0]) + f(&per_class[1])) / 2.0;
    let weighted_of = |f: fn(&ClassScores) -> f64| {
        per_class
            .iter()
            .map(|s| s.support as f64 / n * f(s))
            .sum::<f64>()
    };
    Ok(MetricsReport {
        accuracy: ratio(c.correct(), c.n),
        macro_precision: macro_of(|s| s.precision),
        macro_recall: macro_of(|s| s.recall),
        macro_f1: macro_of(|s| s.f1),
        weighted_precision: weighted_of(|s| s.precision),
        weighted_recall: weighted_of(|s| s.recall),
        weighted_f1: weighted_of(|s| s.f1),
        per_class,
        per_class_ap: None,
        map: None,
    })
}

/// Micro-averaged F1 (pooled TP/FP/FN over both classes).
pub fn micro_f1(predictions: &[u8], labels: &[u8]) -> Result<f64, MetricsError> {
    let c = ConfusionCounts::from_pairs(predictions, labels)?;
    let tp = c.tp[0] + c.tp[1];
    let fp = c.fp[0] + c.fp[1];
    let fn_ = c.fn_[0] + c.fn_[1];
    Ok(ratio(2 * tp, 2 * tp + fp + fn_))
}

/// Intersection over union; 0 for disjoint boxes or a zero-area union.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection(b).area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: Rect,
    pub confidence: f64,
    pub class_id: String,
    pub image_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rect: Rect,
    pub class_id: String,
    pub image_id: u64,
}

/// Outcome of matching one detection, in confidence order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Greedy matching and the resulting precision/recall sequence, one point
/// per detection in descending confidence (stable on ties).
pub fn pr_curve(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    iou_threshold: f64,
) -> Result<Vec<PrPoint>, MetricsError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(MetricsError::Threshold(iou_threshold));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence));
    let mut matched = vec![false; ground_truths.len()];
    let n_gt = ground_truths.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(detections.len());
    for &d in &order {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            if matched[g] || gt.image_id != det.image_id {
                continue;
            }
            let o = iou(&det.rect, &gt.rect);
            if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, _)) => {
                matched[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push(PrPoint {
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / n_gt,
        });
    }
    Ok(points)
}

/// Area under the monotone precision envelope of a PR sequence.
pub fn envelope_area(points: &[PrPoint]) -> f64 {
    // Running max from the high-recall end gives the envelope at each point.
    let mut envelope = vec![0.0f64; points.len()];
    let mut best = 0.0f64;
    for (i, p) in points.iter().enumerate().rev() {
        best = best.max(p.precision);
        envelope[i] = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, &env) in points.iter().zip(&envelope) {
        if p.recall > prev_recall {
            area += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    area
}

/// Average precision of one class. Zero without ground truths.
pub fn average_precision(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    iou_threshold: f64,
) -> Result<f64, MetricsError> {
    let points = pr_curve(detections, ground_truths, iou_threshold)?;
    if ground_truths.is_empty() {
        return Ok(0.0);
    }
    Ok(envelope_area(&points))
}

/// AP for every class that has ground truth, keyed by class id.
pub fn per_class_ap(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    iou_threshold: f64,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    let mut classes: BTreeMap<String, (Vec<Detection>, Vec<GroundTruth>)> = BTreeMap::new();
    for g in ground_truths {
        classes.entry(g.class_id.clone()).or_default().1.push(g.clone());
    }
    for d in detections {
        if let Some(entry) = classes.get_mut(&d.class_id) {
            entry.0.push(d.clone());
        }
    }
    classes
        .into_iter()
        .map(|(k, (d, g))| Ok((k, average_precision(&d, &g, iou_threshold)?)))
        .collect()
}

pub fn mean_ap(per_class_ap: &BTreeMap<String, f64>) -> Result<f64, MetricsError> {
    if per_class_ap.is_empty() {
        return Err(MetricsError::Empty("mean_ap"));
    }
    Ok(per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64)
}
