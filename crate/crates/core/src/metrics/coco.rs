use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::geometry::{BBox, BinaryMask};
use crate::heads::Detection;

/// Recall grid `{0, 0.01, …, 1}`.
pub const RECALL_POINTS: usize = 101;
/// Highest-scoring detections considered per image.
pub const MAX_DETECTIONS: usize = 100;

/// `{0.50, 0.55, …, 0.95}`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApVariant {
    Box,
    Mask,
}

impl ApVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Box => "box",
            Self::Mask => "mask",
        }
    }
}

/// Size bands on ground-truth area in pixels², bounds inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub const ALL: [AreaRange; 4] = [Self::All, Self::Small, Self::Medium, Self::Large];

    pub fn bounds(self) -> (f64, f64) {
        match self {
            Self::All => (0.0, 1e10),
            Self::Small => (0.0, 32.0 * 32.0),
            Self::Medium => (32.0 * 32.0, 96.0 * 96.0),
            Self::Large => (96.0 * 96.0, 1e10),
        }
    }

    pub fn contains(self, area: f64) -> bool {
        let (lo, hi) = self.bounds();
        area >= lo && area <= hi
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredInstance {
    pub bbox: BBox,
    pub mask: BinaryMask,
    pub score: f64,
}

impl From<&Detection> for ScoredInstance {
    fn from(d: &Detection) -> Self {
        Self {
            bbox: d.bbox,
            mask: d.mask.clone(),
            score: d.score,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalImage {
    pub image_id: u64,
    pub ground_truth: Vec<GroundTruth>,
    pub detections: Vec<ScoredInstance>,
}

/// The COCO AP family for one variant, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub variant: ApVariant,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Absent when no ground truth falls in the band.
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

fn area(variant: ApVariant, bbox: &BBox, mask: &BinaryMask) -> f64 {
    match variant {
        ApVariant::Box => bbox.area(),
        ApVariant::Mask => mask.count() as f64,
    }
}

fn overlap(variant: ApVariant, d: &ScoredInstance, g: &GroundTruth) -> f64 {
    match variant {
        ApVariant::Box => d.bbox.iou(&g.bbox),
        ApVariant::Mask => {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in d.mask.0.iter().zip(g.mask.0.iter()) {
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        }
    }
}

/// Detection indices by descending score, ties in input order, capped.
fn score_order(dets: &[ScoredInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    order.truncate(MAX_DETECTIONS);
    order
}

/// Precomputed per-image data shared by every threshold and band.
struct Prepared<'a> {
    image: &'a EvalImage,
    order: Vec<usize>,
    /// `ious[k][g]` for the k-th ranked detection.
    ious: Vec<Vec<f64>>,
    gt_area: Vec<f64>,
    det_area: Vec<f64>,
}

/// One ranked detection after matching: `(score, matched, ignored)`.
type Outcome = (f64, bool, bool);

fn match_image(p: &Prepared, range: AreaRange, threshold: f64) -> (Vec<Outcome>, usize) {
    let n_gt = p.gt_area.len();
    let gt_ignored: Vec<bool> = p.gt_area.iter().map(|&a| !range.contains(a)).collect();
    let mut gt_order: Vec<usize> = (0..n_gt).collect();
    gt_order.sort_by_key(|&g| gt_ignored[g]);
    let mut gt_taken = vec![false; n_gt];
    let mut out = Vec::with_capacity(p.order.len());
    for (k, &d) in p.order.iter().enumerate() {
        let mut best_iou = threshold.min(1.0 - 1e-10);
        let mut best: Option<usize> = None;
        for &g in &gt_order {
            if gt_taken[g] {
                continue;
            }
            if let Some(m) = best {
                if !gt_ignored[m] && gt_ignored[g] {
                    break;
                }
            }
            if p.ious[k][g] < best_iou {
                continue;
            }
            best_iou = p.ious[k][g];
            best = Some(g);
        }
        let score = p.image.detections[d].score;
        match best {
            Some(g) => {
                gt_taken[g] = true;
                out.push((score, true, gt_ignored[g]));
            }
            None => out.push((score, false, !range.contains(p.det_area[k]))),
        }
    }
    (out, gt_ignored.iter().filter(|&&i| !i).count())
}

/// Interpolated precision at the recall grid, or `None` without ground truth.
fn precision_curve(prepared: &[Prepared], range: AreaRange, threshold: f64) -> Option<[f64; RECALL_POINTS]> {
    let mut outcomes = Vec::new();
    let mut npig = 0;
    for p in prepared {
        let (o, n) = match_image(p, range, threshold);
        outcomes.extend(o);
        npig += n;
    }
    if npig == 0 {
        return None;
    }
    // Stable: equal scores keep image order, then rank order.
    outcomes.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for &(_, matched, ignored) in &outcomes {
        if ignored {
            continue;
        }
        if matched {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npig as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut q = [0.0; RECALL_POINTS];
    for (k, slot) in q.iter_mut().enumerate() {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&v| v < r);
        if i < precision.len() {
            *slot = precision[i];
        }
    }
    Some(q)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// COCO-style AP over all images.
///
/// Images are processed in ascending id order so the result does not depend
/// on the order of `images`. Each detection is greedily matched, in
/// descending score order, to the unmatched ground truth of highest IoU
/// (at least the threshold); precision is interpolated at 101 recall points.
pub fn coco_ap(images: &[EvalImage], variant: ApVariant) -> Result<ApReport, MetricsError> {
    let mut sorted: Vec<&EvalImage> = images.iter().collect();
    sorted.sort_by_key(|im| im.image_id);
    if sorted.iter().all(|im| im.ground_truth.is_empty()) {
        return Err(MetricsError::NoGroundTruth);
    }
    let prepared: Vec<Prepared> = sorted
        .iter()
        .map(|&image| {
            let order = score_order(&image.detections);
            let ious = order
                .iter()
                .map(|&d| image.ground_truth.iter().map(|g| overlap(variant, &image.detections[d], g)).collect())
                .collect();
            Prepared {
                image,
                gt_area: image.ground_truth.iter().map(|g| area(variant, &g.bbox, &g.mask)).collect(),
                det_area: order
                    .iter()
                    .map(|&d| area(variant, &image.detections[d].bbox, &image.detections[d].mask))
                    .collect(),
                order,
                ious,
            }
        })
        .collect();
    let thresholds = iou_thresholds();
    let band = |range: AreaRange| -> Option<Vec<f64>> {
        let per_t: Option<Vec<f64>> = thresholds
            .iter()
            .map(|&t| precision_curve(&prepared, range, t).map(|q| mean(&q)))
            .collect();
        per_t
    };
    let all = band(AreaRange::All).ok_or(MetricsError::NoGroundTruth)?;
    let pct = |v: f64| 100.0 * v;
    Ok(ApReport {
        variant,
        ap: pct(mean(&all)),
        ap50: pct(all[0]),
        ap75: pct(all[5]),
        ap_s: band(AreaRange::Small).map(|v| pct(mean(&v))),
        ap_m: band(AreaRange::Medium).map(|v| pct(mean(&v))),
        ap_l: band(AreaRange::Large).map(|v| pct(mean(&v))),
    })
}
