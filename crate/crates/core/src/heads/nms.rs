use std::cmp::Ordering;

use crate::geometry::BBox;

/// Ranking used everywhere detections are ordered: higher score first,
/// ties broken by the lexicographically smaller box `(x1, y1, x2, y2)`,
/// then by input position.
pub fn rank_order(boxes: &[BBox], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| {
                let (ka, kb) = (boxes[a].lexicographic_key(), boxes[b].lexicographic_key());
                ka.iter()
                    .zip(&kb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression. A box is suppressed when its IoU with
/// an already kept box exceeds `iou_threshold`. Returns kept indices in
/// rank order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_order(boxes, scores) {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
