//! Target assignment for anchors and proposals.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch: usize,
    pub pos_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub label: Label,
    /// Best-overlapping ground truth (lowest index on ties); `None` when
    /// there is no ground truth.
    pub gt: Option<usize>,
    pub iou: f64,
}

/// One RoI selected for head training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledRoi {
    pub bbox: BBox,
    pub positive: bool,
    /// Matched ground-truth index for positives.
    pub matched_gt: Option<usize>,
    pub iou: f64,
}

/// Positive when the best IoU ≥ `pos_iou`, negative when < `neg_iou`,
/// ignored in between.
pub fn assign(boxes: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> Vec<Assignment> {
    boxes
        .iter()
        .map(|b| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                let iou = b.iou(g);
                if best.is_none_or(|(_, v)| iou > v) {
                    best = Some((j, iou));
                }
            }
            let iou = best.map_or(0.0, |(_, v)| v);
            let label = if best.is_some() && iou >= pos_iou {
                Label::Positive
            } else if iou < neg_iou {
                Label::Negative
            } else {
                Label::Ignored
            };
            Assignment {
                label,
                gt: best.map(|(j, _)| j),
                iou,
            }
        })
        .collect()
}

/// Anchor labelling for the RPN: [`assign`] plus, for every ground truth,
/// the anchors achieving its highest IoU are made positive so each
/// instance has at least one anchor.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> Vec<Assignment> {
    let mut out = assign(anchors, gts, pos_iou, neg_iou);
    for (j, g) in gts.iter().enumerate() {
        let best = anchors.iter().map(|a| a.iou(g)).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            let iou = a.iou(g);
            if iou == best {
                out[i].label = Label::Positive;
                if out[i].iou < iou || out[i].gt.is_none() {
                    out[i].gt = Some(j);
                    out[i].iou = iou;
                }
            }
        }
    }
    out
}

/// Random subset of positives (at most `batch · pos_fraction`) and
/// negatives filling the batch. Returned indices are ascending.
pub fn subsample(labels: &[Assignment], batch: usize, pos_fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let pos: Vec<usize> = labels.iter().enumerate().filter(|(_, a)| a.label == Label::Positive).map(|(i, _)| i).collect();
    let neg: Vec<usize> = labels.iter().enumerate().filter(|(_, a)| a.label == Label::Negative).map(|(i, _)| i).collect();
    let n_pos = pos.len().min((batch as f64 * pos_fraction) as usize);
    let n_neg = neg.len().min(batch - n_pos);
    let pick = |from: &[usize], k: usize, rng: &mut dyn rand::RngCore| {
        let mut chosen: Vec<usize> = index::sample(rng, from.len(), k).into_iter().map(|i| from[i]).collect();
        chosen.sort_unstable();
        chosen
    };
    let p = pick(&pos, n_pos, rng);
    let n = pick(&neg, n_neg, rng);
    (p, n)
}

/// Labels proposals against ground truth and samples a training batch:
/// positives first, then negatives, each in proposal order.
pub fn match_and_sample(proposals: &[BBox], gt_boxes: &[BBox], cfg: &SamplingConfig, rng: &mut impl Rng) -> Vec<SampledRoi> {
    let labels = assign(proposals, gt_boxes, cfg.pos_iou, cfg.neg_iou);
    let (pos, neg) = subsample(&labels, cfg.batch, cfg.pos_fraction, rng);
    pos.iter()
        .map(|&i| SampledRoi {
            bbox: proposals[i],
            positive: true,
            matched_gt: labels[i].gt,
            iou: labels[i].iou,
        })
        .chain(neg.iter().map(|&i| SampledRoi {
            bbox: proposals[i],
            positive: false,
            matched_gt: None,
            iou: labels[i].iou,
        }))
        .collect()
}
