use serde::{Deserialize, Serialize};

use super::anchors::{generate_anchors, Anchor, LevelShape};
use super::box_coder::BoxCoder;
use super::nms::nms;
use crate::backbones::FeaturePyramid;
use crate::geometry::BBox;
use crate::nn::ops::sigmoid;
use crate::nn::{Ctx, Graph, Var, WeightInit};

/// Proposals narrower or shorter than this (in input pixels) are dropped.
pub const MIN_PROPOSAL_SIZE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    /// Highest-scoring anchors kept per level before NMS.
    pub pre_nms_top_n: usize,
    /// Proposals kept after NMS over all levels.
    pub post_nms_top_n: usize,
    pub nms_iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Raw RPN predictions for one image.
pub struct RpnOutputs {
    /// Per level `[1, A, H, W]` objectness logits.
    pub objectness: Vec<Var>,
    /// Per level `[1, 4A, H, W]` box deltas.
    pub deltas: Vec<Var>,
    pub anchors: Vec<Anchor>,
    level_offsets: Vec<usize>,
    level_shapes: Vec<LevelShape>,
}

impl RpnOutputs {
    fn locate(&self, anchor: usize) -> (usize, usize) {
        let level = self.level_offsets.partition_point(|&o| o <= anchor) - 1;
        (level, anchor - self.level_offsets[level])
    }

    /// `(level, flat index)` of an anchor's objectness logit.
    pub fn objectness_index(&self, anchor: usize) -> (usize, usize) {
        self.locate(anchor)
    }

    /// `(level, flat indices)` of an anchor's four deltas.
    pub fn delta_indices(&self, anchor: usize) -> (usize, [usize; 4]) {
        let (level, local) = self.locate(anchor);
        let s = self.level_shapes[level];
        let hw = s.height * s.width;
        let (a, rem) = (local / hw, local % hw);
        (level, [0, 1, 2, 3].map(|k| (4 * a + k) * hw + rem))
    }

    /// Indices of an anchor's deltas in the level-ordered concatenation of
    /// all delta maps. The objectness concatenation is indexed by the
    /// anchor id itself.
    pub fn flat_delta_indices(&self, anchor: usize) -> [usize; 4] {
        let (level, idx) = self.delta_indices(anchor);
        idx.map(|i| 4 * self.level_offsets[level] + i)
    }

    pub fn objectness_logit(&self, g: &Graph, anchor: usize) -> f64 {
        let (l, i) = self.objectness_index(anchor);
        g.value(self.objectness[l]).data()[i]
    }

    pub fn anchor_deltas(&self, g: &Graph, anchor: usize) -> [f64; 4] {
        let (l, idx) = self.delta_indices(anchor);
        let d = g.value(self.deltas[l]).data();
        idx.map(|i| d[i])
    }
}

/// Shared 3×3 conv + ReLU, then 1×1 objectness and box-delta convolutions,
/// applied to every pyramid level with the same weights.
pub fn rpn_forward(ctx: &mut Ctx, pyramid: &FeaturePyramid, scales: &[f64], ratios: &[f64]) -> RpnOutputs {
    let a = scales.len() * ratios.len();
    let c = pyramid.channels(ctx.g);
    let mut objectness = Vec::new();
    let mut deltas = Vec::new();
    let mut level_shapes = Vec::new();
    for (&level, &stride) in pyramid.levels.iter().zip(&pyramid.strides) {
        let h = ctx.conv("rpn.conv", level, c, 3, 1, true, WeightInit::Normal { std: 0.01 });
        let h = ctx.g.relu(h);
        objectness.push(ctx.conv("rpn.objectness", h, a, 1, 1, true, WeightInit::Normal { std: 0.01 }));
        deltas.push(ctx.conv("rpn.deltas", h, 4 * a, 1, 1, true, WeightInit::Normal { std: 0.01 }));
        let s = ctx.g.shape(level);
        level_shapes.push(LevelShape {
            height: s[2],
            width: s[3],
            stride,
        });
    }
    let anchors = generate_anchors(&level_shapes, scales, ratios);
    let mut level_offsets = Vec::with_capacity(level_shapes.len());
    let mut offset = 0;
    for s in &level_shapes {
        level_offsets.push(offset);
        offset += s.height * s.width * a;
    }
    RpnOutputs {
        objectness,
        deltas,
        anchors,
        level_offsets,
        level_shapes,
    }
}

/// Decodes, clips, suppresses and ranks proposals from RPN outputs.
pub fn propose(g: &Graph, out: &RpnOutputs, cfg: &ProposalConfig, image_width: f64, image_height: f64) -> Vec<Proposal> {
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for level in 0..out.objectness.len() {
        let start = out.level_offsets[level];
        let end = out
            .level_offsets
            .get(level + 1)
            .copied()
            .unwrap_or(out.anchors.len());
        let logits = g.value(out.objectness[level]).data();
        let mut order: Vec<usize> = (start..end).collect();
        order.sort_by(|&a, &b| logits[b - start].total_cmp(&logits[a - start]).then(a.cmp(&b)));
        order.truncate(cfg.pre_nms_top_n);
        for i in order {
            let bbox = BoxCoder::RPN
                .decode(&out.anchors[i].bbox, out.anchor_deltas(g, i))
                .clip(image_width, image_height);
            if bbox.width() < MIN_PROPOSAL_SIZE || bbox.height() < MIN_PROPOSAL_SIZE {
                continue;
            }
            boxes.push(bbox);
            scores.push(sigmoid(logits[i - start]));
        }
    }
    let mut kept = nms(&boxes, &scores, cfg.nms_iou);
    kept.truncate(cfg.post_nms_top_n);
    kept.into_iter()
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
        })
        .collect()
}

pub fn rpn_forward_and_propose(
    ctx: &mut Ctx,
    pyramid: &FeaturePyramid,
    scales: &[f64],
    ratios: &[f64],
    cfg: &ProposalConfig,
    image_width: f64,
    image_height: f64,
) -> (RpnOutputs, Vec<Proposal>) {
    let out = rpn_forward(ctx, pyramid, scales, ratios);
    let proposals = propose(ctx.g, &out, cfg, image_width, image_height);
    (out, proposals)
}
