//! Region proposals, RoI pooling, box and mask heads, and the training
//! losses of the Mask R-CNN family.

pub mod anchors;
pub mod box_coder;
pub mod losses;
pub mod nms;
pub mod roi_align;
pub mod roi_heads;
pub mod rpn;
pub mod sampling;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::BackboneError;
use crate::dataset::Category;
use crate::geometry::{BBox, BinaryMask};

pub use anchors::{generate_anchors, Anchor, LevelShape};
pub use box_coder::BoxCoder;
pub use losses::{mask_loss, smooth_l1, LossBundle, LossWeights};
pub use nms::nms;
pub use roi_align::roi_align;
pub use roi_heads::{paste_mask, pool_rois, Pooling};
pub use rpn::{propose, rpn_forward, rpn_forward_and_propose, Proposal, ProposalConfig, RpnOutputs};
pub use sampling::{match_and_sample, SampledRoi, SamplingConfig};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("degenerate roi {0:?}")]
    DegenerateRoi(BBox),
    #[error("mask target value {0} is not binary")]
    NonBinaryTarget(f64),
    #[error("prediction has {pred} elements but target has {target}")]
    ShapeMismatch { pred: usize, target: usize },
    #[error("invalid head config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Everything downstream of the feature pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Anchor side lengths in units of the level stride.
    pub anchor_scales: Vec<f64>,
    /// Anchor width / height ratios.
    pub anchor_ratios: Vec<f64>,
    pub rpn_sampling: SamplingConfig,
    pub rpn_train: ProposalConfig,
    pub rpn_test: ProposalConfig,
    pub roi_sampling: SamplingConfig,
    /// Jittered copies of each ground-truth box added to the training
    /// proposals.
    pub gt_jitter: usize,
    /// RoIAlign output side for the box head.
    pub box_pool: usize,
    /// RoIAlign output side for the mask head.
    pub mask_pool: usize,
    /// Side of the predicted mask grid; twice `mask_pool`.
    pub mask_size: usize,
    pub samples_per_bin: usize,
    pub box_hidden: usize,
    pub mask_channels: usize,
    pub mask_convs: usize,
    /// Level assignment for non-adaptive pooling: an RoI of side
    /// `canonical_scale` maps to pyramid level `canonical_level`.
    pub canonical_scale: f64,
    pub canonical_level: i32,
    pub loss_weights: LossWeights,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl HeadConfig {
    pub fn paper() -> Self {
        Self {
            anchor_scales: vec![8.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_sampling: SamplingConfig {
                pos_iou: 0.7,
                neg_iou: 0.3,
                batch: 256,
                pos_fraction: 0.5,
            },
            rpn_train: ProposalConfig {
                pre_nms_top_n: 2000,
                post_nms_top_n: 1000,
                nms_iou: 0.7,
            },
            rpn_test: ProposalConfig {
                pre_nms_top_n: 1000,
                post_nms_top_n: 1000,
                nms_iou: 0.7,
            },
            roi_sampling: SamplingConfig {
                pos_iou: 0.5,
                neg_iou: 0.5,
                batch: 512,
                pos_fraction: 0.25,
            },
            gt_jitter: 0,
            box_pool: 7,
            mask_pool: 14,
            mask_size: 28,
            samples_per_bin: 2,
            box_hidden: 1024,
            mask_channels: 256,
            mask_convs: 4,
            canonical_scale: 224.0,
            canonical_level: 4,
            loss_weights: LossWeights::default(),
        }
    }

    /// Narrow heads and small sampling budgets for CPU runs on small images.
    pub fn toy() -> Self {
        Self {
            anchor_scales: vec![4.0],
            rpn_sampling: SamplingConfig {
                batch: 64,
                ..Self::paper().rpn_sampling
            },
            rpn_train: ProposalConfig {
                pre_nms_top_n: 200,
                post_nms_top_n: 64,
                nms_iou: 0.7,
            },
            rpn_test: ProposalConfig {
                pre_nms_top_n: 200,
                post_nms_top_n: 50,
                nms_iou: 0.7,
            },
            roi_sampling: SamplingConfig {
                batch: 16,
                pos_fraction: 0.5,
                ..Self::paper().roi_sampling
            },
            gt_jitter: 4,
            box_hidden: 64,
            mask_channels: 16,
            mask_convs: 2,
            canonical_scale: 56.0,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |m: &str| Err(HeadError::InvalidConfig(m.to_string()));
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor_scales and anchor_ratios must be nonempty");
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("anchor scales and ratios must be positive");
        }
        if self.mask_size != 2 * self.mask_pool {
            return bad("mask_size must equal 2 * mask_pool");
        }
        if self.box_pool == 0 || self.mask_pool == 0 || self.samples_per_bin == 0 {
            return bad("pool sizes and samples_per_bin must be positive");
        }
        if self.box_hidden == 0 || self.mask_channels == 0 {
            return bad("box_hidden and mask_channels must be positive");
        }
        for s in [&self.rpn_sampling, &self.roi_sampling] {
            if !(0.0 <= s.neg_iou && s.neg_iou <= s.pos_iou && s.pos_iou <= 1.0) {
                return bad("sampling thresholds must satisfy 0 <= neg_iou <= pos_iou <= 1");
            }
            if !(0.0..=1.0).contains(&s.pos_fraction) || s.batch == 0 {
                return bad("pos_fraction must lie in [0, 1] and batch must be positive");
            }
        }
        for p in [&self.rpn_train, &self.rpn_test] {
            if !(0.0..=1.0).contains(&p.nms_iou) || p.post_nms_top_n == 0 || p.pre_nms_top_n == 0 {
                return bad("proposal counts must be positive and nms_iou in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Inference thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Detections need `score ≥ score_threshold`; 1.0 admits nothing.
    pub score_threshold: f64,
    /// Mask pixels need `probability ≥ mask_threshold`.
    pub mask_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            mask_threshold: 0.5,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl PredictConfig {
    pub fn admits(&self, score: f64) -> bool {
        self.score_threshold < 1.0 && score >= self.score_threshold
    }
}

/// One predicted instance in original image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: Category,
    pub mask: BinaryMask,
    /// Row-major `mask_size × mask_size` foreground probabilities in RoI
    /// coordinates.
    pub raw_mask: Vec<f64>,
    pub mask_size: usize,
}

impl Detection {
    /// Re-binarises the raw grid at another threshold.
    pub fn mask_at(&self, threshold: f64) -> BinaryMask {
        paste_mask(
            &self.raw_mask,
            self.mask_size,
            &self.bbox,
            self.mask.height(),
            self.mask.width(),
            threshold,
        )
    }
}
