//! IoU, the COCO AP family, and image-level detection statistics.

mod coco;
pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, BinaryMask};
use crate::heads::Detection;

pub use coco::{coco_ap, iou_thresholds, ApReport, ApVariant, AreaRange, EvalImage, GroundTruth, ScoredInstance, RECALL_POINTS};
pub use report::{compare_report, format_tables, EvalReport, SceneBreakdown};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("mask shapes differ: {a:?} vs {b:?}")]
    MaskShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("IoU of two empty masks is undefined")]
    BothMasksEmpty,
    #[error("no ground-truth instances to evaluate")]
    NoGroundTruth,
    #[error("image ids differ between predictions and labels: {0:?}")]
    IdMismatch(Vec<u64>),
    #[error("confusion counts are all zero")]
    EmptyCounts,
    #[error("evaluation outputs cover different datasets: {0} vs {1}")]
    DigestMismatch(String, String),
    #[error("nothing to compare")]
    NoReports,
}

pub fn box_iou(a: &BBox, b: &BBox) -> Result<f64, MetricsError> {
    for bx in [a, b] {
        if bx.is_degenerate() {
            return Err(MetricsError::DegenerateBox(*bx));
        }
    }
    Ok(a.iou(b))
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    let (sa, sb) = ((a.height(), a.width()), (b.height(), b.width()));
    if sa != sb {
        return Err(MetricsError::MaskShapeMismatch { a: sa, b: sb });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.0.iter().zip(b.0.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(MetricsError::BothMasksEmpty);
    }
    Ok(inter as f64 / union as f64)
}

/// The image-level criterion: at least one detection scoring at least the
/// threshold.
pub fn image_has_detection(detections: &[Detection], score_threshold: f64) -> bool {
    detections.iter().any(|d| d.score >= score_threshold)
}

pub fn scores_have_detection(scores: &[f64], score_threshold: f64) -> bool {
    scores.iter().any(|&s| s >= score_threshold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, has_crack: bool, flagged: bool) {
        match (has_crack, flagged) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Image-level confusion counts.
///
/// `predictions` maps image id to detection scores and `labels` maps image
/// id to whether the image contains a crack; both must cover the same ids.
pub fn confusion(
    predictions: &BTreeMap<u64, Vec<f64>>,
    labels: &BTreeMap<u64, bool>,
    score_threshold: f64,
) -> Result<ConfusionCounts, MetricsError> {
    let mismatched: Vec<u64> = predictions
        .keys()
        .filter(|k| !labels.contains_key(k))
        .chain(labels.keys().filter(|k| !predictions.contains_key(k)))
        .copied()
        .collect();
    if !mismatched.is_empty() {
        return Err(MetricsError::IdMismatch(mismatched));
    }
    let mut c = ConfusionCounts::default();
    for (id, scores) in predictions {
        c.record(labels[id], scores_have_detection(scores, score_threshold));
    }
    Ok(c)
}

/// Recall, precision and accuracy as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    /// Absent when there are no crack images.
    pub recall: Option<f64>,
    /// Absent when nothing was flagged.
    pub precision: Option<f64>,
    pub accuracy: f64,
}

pub fn prf_accuracy(c: &ConfusionCounts) -> Result<Prf, MetricsError> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(Prf {
        recall: ratio(c.tp, c.tp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
        accuracy: (c.tp + c.tn) as f64 / total as f64,
    })
}
