//! Mask R-CNN assembly: backbone, RPN, box and mask heads, training losses
//! and inference.

use image::imageops::{resize, FilterType};
use image::RgbImage;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Sample;
use crate::backbones::{backbone_forward, BackboneConfig, BackboneError, BackboneKind, FeaturePyramid, INPUT_DIVISOR};
use crate::dataset::Category;
use crate::geometry::{BBox, BinaryMask};
use crate::heads::rpn::MIN_PROPOSAL_SIZE;
use crate::heads::roi_heads::{box_head, mask_head};
use crate::heads::sampling::{label_anchors, subsample, Label};
use crate::heads::{
    match_and_sample, nms, paste_mask, pool_rois, propose, rpn_forward, BoxCoder, Detection, HeadConfig,
    HeadError, LossBundle, Pooling, PredictConfig, RpnOutputs, SampledRoi,
};
use crate::nn::ops::sigmoid;
use crate::nn::{Ctx, Graph, ParamStore, Tensor, Var};

/// Per-channel normalisation applied to `[0, 1]` pixel values.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter store does not match the model: {0}")]
    ParamMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    /// Longer image side after resizing; the canvas is then padded up to a
    /// multiple of 32.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper(BackboneKind::APanet)
    }
}

impl ModelConfig {
    pub fn paper(kind: BackboneKind) -> Self {
        Self {
            backbone: BackboneConfig::paper(kind),
            heads: HeadConfig::paper(),
            input_size: 1024,
        }
    }

    pub fn toy(kind: BackboneKind) -> Self {
        Self {
            backbone: BackboneConfig::toy(kind),
            heads: HeadConfig::toy(),
            input_size: 64,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        self.heads.validate()?;
        if self.input_size < INPUT_DIVISOR {
            return Err(ModelError::InvalidConfig(format!(
                "input_size must be at least {INPUT_DIVISOR}"
            )));
        }
        Ok(())
    }

    pub fn pooling(&self) -> Pooling {
        match self.backbone.kind {
            BackboneKind::APanet => Pooling::Adaptive,
            _ => Pooling::Assigned {
                canonical_scale: self.heads.canonical_scale,
                canonical_level: self.heads.canonical_level,
            },
        }
    }
}

/// A resized, normalised and padded network input.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    /// `[1, 3, H, W]` with `H`, `W` multiples of 32.
    pub tensor: Tensor,
    /// Resized-over-original size ratio.
    pub scale: f64,
    /// Extent of real image content inside the padded canvas.
    pub height: usize,
    pub width: usize,
    pub original_height: usize,
    pub original_width: usize,
}

fn to_rgb(image: &Array3<u8>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]])
    })
}

pub fn image_to_array(image: &RgbImage) -> Array3<u8> {
    let (w, h) = image.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| image.get_pixel(x as u32, y as u32)[c])
}

fn resized_dims(height: usize, width: usize, input_size: usize) -> (f64, usize, usize) {
    let scale = input_size as f64 / height.max(width) as f64;
    let h = ((height as f64 * scale).round() as usize).clamp(1, input_size);
    let w = ((width as f64 * scale).round() as usize).clamp(1, input_size);
    (scale, h, w)
}

/// Scales the longer side to `input_size` (bilinear), normalises to
/// `(v / 255 − 0.5) / 0.25` and zero-pads to a multiple of 32.
pub fn prepare_image(image: &Array3<u8>, input_size: usize) -> PreparedImage {
    let (oh, ow, _) = image.dim();
    let (scale, h, w) = resized_dims(oh, ow, input_size);
    let resized = if (h, w) == (oh, ow) {
        image.clone()
    } else {
        image_to_array(&resize(&to_rgb(image), w as u32, h as u32, FilterType::Triangle))
    };
    let ph = h.div_ceil(INPUT_DIVISOR) * INPUT_DIVISOR;
    let pw = w.div_ceil(INPUT_DIVISOR) * INPUT_DIVISOR;
    let mut tensor = Tensor::zeros(&[1, 3, ph, pw]);
    let data = tensor.data_mut();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[(c * ph + y) * pw + x] = (resized[[y, x, c]] as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD;
            }
        }
    }
    PreparedImage {
        tensor,
        scale,
        height: h,
        width: w,
        original_height: oh,
        original_width: ow,
    }
}

/// Nearest-neighbour mask resize sampling at pixel centers.
pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    if (height, width) == (mask.height(), mask.width()) {
        return mask.clone();
    }
    let sy = mask.height() as f64 / height as f64;
    let sx = mask.width() as f64 / width as f64;
    BinaryMask::from_fn(height, width, |(r, c)| {
        let y = (((r as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        let x = (((c as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
        mask.get(y, x)
    })
}

/// One training image in network coordinates.
#[derive(Clone, Debug)]
pub struct TrainTarget {
    pub image: PreparedImage,
    pub boxes: Vec<BBox>,
    pub masks: Vec<BinaryMask>,
}

impl TrainTarget {
    /// Resizes a sample; instances whose mask vanishes are dropped and boxes
    /// are recomputed from the resized masks.
    pub fn from_sample(sample: &Sample, input_size: usize) -> Self {
        let image = prepare_image(&sample.image, input_size);
        let mut boxes = Vec::new();
        let mut masks = Vec::new();
        for m in &sample.masks {
            let r = resize_mask(m, image.height, image.width);
            if let Some(b) = r.tight_bbox() {
                boxes.push(b);
                masks.push(r);
            }
        }
        Self { image, boxes, masks }
    }
}

/// Sampling decisions of one training step. Holding the plan fixed makes
/// the loss a smooth function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    /// Sampled positive anchors with their matched ground truth.
    pub rpn_positive: Vec<(usize, usize)>,
    pub rpn_negative: Vec<usize>,
    /// Positives first, then negatives.
    pub rois: Vec<SampledRoi>,
}

pub enum PlanSource<'a> {
    Sample(&'a mut ChaCha8Rng),
    Fixed(&'a TrainPlan),
}

pub struct TrainStep {
    pub graph: Graph,
    /// Weighted total loss node.
    pub total: Var,
    /// Unweighted loss terms.
    pub losses: LossBundle,
    pub plan: TrainPlan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskRcnn {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl MaskRcnn {
    /// Initialises every parameter by tracing the network once in init mode.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        {
            let mut ctx = Ctx::initializing(&mut g, &mut params, &mut rng);
            trace(&mut ctx, &config)?;
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking that they match the
    /// configuration exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let reference = Self::new(config.clone(), 0)?;
        let want: Vec<(&String, &[usize])> = reference.params.iter().map(|(k, v)| (k, v.shape())).collect();
        let got: Vec<(&String, &[usize])> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if want != got {
            let detail = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} parameters, found {}", want.len(), got.len()));
            return Err(ModelError::ParamMismatch(detail));
        }
        Ok(Self { config, params })
    }

    /// Builds the training graph for one image.
    pub fn training_step(&self, target: &TrainTarget, plan: PlanSource<'_>) -> Result<TrainStep, ModelError> {
        let cfg = &self.config.heads;
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.params);
        let image = ctx.constant(target.image.tensor.clone());
        let pyramid = backbone_forward(&mut ctx, &self.config.backbone, image)?;
        let rpn = rpn_forward(&mut ctx, &pyramid, &cfg.anchor_scales, &cfg.anchor_ratios);
        let gts = &target.boxes;

        let plan = match plan {
            PlanSource::Fixed(p) => p.clone(),
            PlanSource::Sample(rng) => {
                let anchor_boxes: Vec<BBox> = rpn.anchors.iter().map(|a| a.bbox).collect();
                let s = &cfg.rpn_sampling;
                let labels = label_anchors(&anchor_boxes, gts, s.pos_iou, s.neg_iou);
                let (pos, neg) = subsample(&labels, s.batch, s.pos_fraction, rng);
                let rpn_positive = pos.iter().map(|&i| (i, labels[i].gt.expect("positive anchor has a match"))).collect();
                let (w, h) = (target.image.width as f64, target.image.height as f64);
                let mut candidates: Vec<BBox> = propose(ctx.g, &rpn, &cfg.rpn_train, w, h).iter().map(|p| p.bbox).collect();
                candidates.extend(gts.iter().copied());
                candidates.extend(jittered_boxes(gts, cfg.gt_jitter, w, h, rng));
                let rois = match_and_sample(&candidates, gts, &cfg.roi_sampling, rng);
                debug_assert!(labels.iter().all(|a| a.label != Label::Positive || a.gt.is_some()));
                TrainPlan {
                    rpn_positive,
                    rpn_negative: neg,
                    rois,
                }
            }
        };

        let (rpn_obj, rpn_box) = rpn_losses(&mut ctx, &rpn, &plan, gts);
        let (head_class, head_box, mask) = self.head_losses(&mut ctx, &pyramid, &plan, target)?;
        let w = &cfg.loss_weights;
        let terms = [
            (rpn_obj, w.rpn_objectness),
            (rpn_box, w.rpn_box),
            (head_class, w.head_class),
            (head_box, w.head_box),
            (mask, w.mask),
        ];
        let weighted = terms.iter().map(|&(v, wt)| ctx.g.scale(v, wt)).collect();
        let total = ctx.g.sum(weighted);
        let item = |v: Var| g.value(v).item();
        let losses = LossBundle {
            rpn_objectness: item(rpn_obj),
            rpn_box: item(rpn_box),
            head_class: item(head_class),
            head_box: item(head_box),
            mask: item(mask),
        };
        Ok(TrainStep {
            graph: g,
            total,
            losses,
            plan,
        })
    }

    fn head_losses(
        &self,
        ctx: &mut Ctx,
        pyramid: &FeaturePyramid,
        plan: &TrainPlan,
        target: &TrainTarget,
    ) -> Result<(Var, Var, Var), ModelError> {
        let cfg = &self.config.heads;
        let pooling = self.config.pooling();
        let zero = || Tensor::scalar(0.0);
        if plan.rois.is_empty() {
            let z = ctx.constant(zero());
            return Ok((z, z, z));
        }
        let boxes: Vec<BBox> = plan.rois.iter().map(|r| r.bbox).collect();
        let pooled = pool_rois(ctx.g, pyramid, &boxes, cfg.box_pool, cfg.samples_per_bin, pooling)?;
        let (cls, deltas) = box_head(ctx, cfg, pooled);
        let labels: Vec<usize> = plan.rois.iter().map(|r| r.positive as usize).collect();
        let class_loss = ctx.g.softmax_ce_mean(cls, labels);

        let positives: Vec<(usize, &SampledRoi)> = plan.rois.iter().enumerate().filter(|(_, r)| r.positive).collect();
        if positives.is_empty() {
            let z = ctx.constant(zero());
            return Ok((class_loss, z, z));
        }
        let mut index = Vec::with_capacity(4 * positives.len());
        let mut box_targets = Vec::with_capacity(4 * positives.len());
        let mut mask_targets = Vec::new();
        let m = cfg.mask_size;
        for &(i, roi) in &positives {
            let gt = roi.matched_gt.expect("positive roi has a match");
            index.extend((0..4).map(|k| 4 * i + k));
            box_targets.extend(BoxCoder::HEAD.encode(&roi.bbox, &target.boxes[gt]));
            mask_targets.extend(mask_target(&target.masks[gt], &roi.bbox, m)?);
        }
        let picked = ctx.g.gather(deltas, index);
        let box_loss = ctx.g.smooth_l1_sum(picked, box_targets, 1.0 / plan.rois.len() as f64);

        let pos_boxes: Vec<BBox> = positives.iter().map(|(_, r)| r.bbox).collect();
        let pooled = pool_rois(ctx.g, pyramid, &pos_boxes, cfg.mask_pool, cfg.samples_per_bin, pooling)?;
        let logits = mask_head(ctx, cfg, pooled);
        let mask_loss = ctx.g.bce_mean(logits, mask_targets);
        Ok((class_loss, box_loss, mask_loss))
    }

    /// Runs the full inference pipeline on one RGB image.
    pub fn predict(&self, image: &Array3<u8>, cfg: &PredictConfig) -> Result<Vec<Detection>, ModelError> {
        let prepared = prepare_image(image, self.config.input_size);
        self.predict_prepared(&prepared, cfg)
    }

    pub fn predict_prepared(&self, prepared: &PreparedImage, cfg: &PredictConfig) -> Result<Vec<Detection>, ModelError> {
        let heads = &self.config.heads;
        let pooling = self.config.pooling();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.params);
        let image = ctx.constant(prepared.tensor.clone());
        let pyramid = backbone_forward(&mut ctx, &self.config.backbone, image)?;
        let rpn = rpn_forward(&mut ctx, &pyramid, &heads.anchor_scales, &heads.anchor_ratios);
        let (w, h) = (prepared.width as f64, prepared.height as f64);
        let proposals: Vec<BBox> = propose(ctx.g, &rpn, &heads.rpn_test, w, h).iter().map(|p| p.bbox).collect();
        if proposals.is_empty() || cfg.score_threshold >= 1.0 {
            return Ok(Vec::new());
        }
        let pooled = pool_rois(ctx.g, &pyramid, &proposals, heads.box_pool, heads.samples_per_bin, pooling)?;
        let (cls, deltas) = box_head(&mut ctx, heads, pooled);
        let cls = ctx.g.value(cls).data().to_vec();
        let deltas = ctx.g.value(deltas).data().to_vec();

        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, roi) in proposals.iter().enumerate() {
            let score = sigmoid(cls[2 * i + 1] - cls[2 * i]);
            if !cfg.admits(score) {
                continue;
            }
            let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
            let b = BoxCoder::HEAD.decode(roi, d).clip(w, h);
            if b.width() < MIN_PROPOSAL_SIZE || b.height() < MIN_PROPOSAL_SIZE {
                continue;
            }
            boxes.push(b);
            scores.push(score);
        }
        let mut keep = nms(&boxes, &scores, cfg.nms_iou);
        keep.truncate(cfg.max_detections);
        if keep.is_empty() {
            return Ok(Vec::new());
        }
        let kept: Vec<BBox> = keep.iter().map(|&i| boxes[i]).collect();
        let pooled = pool_rois(ctx.g, &pyramid, &kept, heads.mask_pool, heads.samples_per_bin, pooling)?;
        let logits = mask_head(&mut ctx, heads, pooled);
        let logits = ctx.g.value(logits).data();
        let m = heads.mask_size;
        let (oh, ow) = (prepared.original_height, prepared.original_width);
        Ok(keep
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let raw_mask: Vec<f64> = logits[k * m * m..(k + 1) * m * m].iter().map(|&z| sigmoid(z)).collect();
                let bbox = boxes[i].scale(1.0 / prepared.scale).clip(ow as f64, oh as f64);
                let mask = paste_mask(&raw_mask, m, &bbox, oh, ow, cfg.mask_threshold);
                Detection {
                    bbox,
                    score: scores[i],
                    class: Category::Crack,
                    mask,
                    raw_mask,
                    mask_size: m,
                }
            })
            .collect())
    }
}

/// Forward pass over a dummy input touching every parameter.
fn trace(ctx: &mut Ctx, config: &ModelConfig) -> Result<(), ModelError> {
    let heads = &config.heads;
    let side = 2 * INPUT_DIVISOR;
    let image = ctx.constant(Tensor::zeros(&[1, 3, side, side]));
    let pyramid = backbone_forward(ctx, &config.backbone, image)?;
    rpn_forward(ctx, &pyramid, &heads.anchor_scales, &heads.anchor_ratios);
    let roi = [BBox::new(4.0, 4.0, 36.0, 36.0)];
    let pooled = pool_rois(ctx.g, &pyramid, &roi, heads.box_pool, heads.samples_per_bin, config.pooling())?;
    box_head(ctx, heads, pooled);
    let pooled = pool_rois(ctx.g, &pyramid, &roi, heads.mask_pool, heads.samples_per_bin, config.pooling())?;
    mask_head(ctx, heads, pooled);
    Ok(())
}

/// `copies` random perturbations of every ground-truth box: corners moved
/// by up to 10% of the box size, clipped to the image.
fn jittered_boxes(gts: &[BBox], copies: usize, width: f64, height: f64, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let mut out = Vec::with_capacity(gts.len() * copies);
    for g in gts {
        for _ in 0..copies {
            let (dw, dh) = (0.1 * g.width(), 0.1 * g.height());
            let mut d = [0.0; 4];
            for (k, v) in d.iter_mut().enumerate() {
                let span = if k % 2 == 0 { dw } else { dh };
                *v = rng.random_range(-span..=span);
            }
            let b = BBox::new(g.x1 + d[0], g.y1 + d[1], g.x2 + d[2], g.y2 + d[3]).clip(width, height);
            if b.width() >= MIN_PROPOSAL_SIZE && b.height() >= MIN_PROPOSAL_SIZE {
                out.push(b);
            }
        }
    }
    out
}

fn rpn_losses(ctx: &mut Ctx, rpn: &RpnOutputs, plan: &TrainPlan, gts: &[BBox]) -> (Var, Var) {
    let sampled = plan.rpn_positive.len() + plan.rpn_negative.len();
    let obj_all = ctx.g.concat(rpn.objectness.clone());
    let mut index: Vec<usize> = plan.rpn_positive.iter().map(|&(a, _)| a).collect();
    index.extend(&plan.rpn_negative);
    let mut targets = vec![1.0; plan.rpn_positive.len()];
    targets.resize(sampled, 0.0);
    let picked = ctx.g.gather(obj_all, index);
    let obj_loss = ctx.g.bce_mean(picked, targets);

    let deltas_all = ctx.g.concat(rpn.deltas.clone());
    let mut index = Vec::with_capacity(4 * plan.rpn_positive.len());
    let mut targets = Vec::with_capacity(4 * plan.rpn_positive.len());
    for &(a, gt) in &plan.rpn_positive {
        index.extend(rpn.flat_delta_indices(a));
        targets.extend(BoxCoder::RPN.encode(&rpn.anchors[a].bbox, &gts[gt]));
    }
    let picked = ctx.g.gather(deltas_all, index);
    let box_loss = ctx.g.smooth_l1_sum(picked, targets, 1.0 / sampled.max(1) as f64);
    (obj_loss, box_loss)
}

/// Ground-truth mask resampled into an RoI on an `m × m` grid: each cell
/// reads the pixels under 2×2 sample points and is set when at least half
/// of them are.
pub fn mask_target(mask: &BinaryMask, roi: &BBox, m: usize) -> Result<Vec<f64>, HeadError> {
    if roi.is_degenerate() {
        return Err(HeadError::DegenerateRoi(*roi));
    }
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    let (bw, bh) = (roi.width() / m as f64, roi.height() / m as f64);
    let hit = |y: f64, x: f64| {
        (0.0..h).contains(&y) && (0.0..w).contains(&x) && mask.get(y as usize, x as usize)
    };
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let mut n = 0;
            for sy in [0.25, 0.75] {
                for sx in [0.25, 0.75] {
                    n += hit(roi.y1 + (i as f64 + sy) * bh, roi.x1 + (j as f64 + sx) * bw) as usize;
                }
            }
            out.push((n >= 2) as u8 as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepare_pads_to_divisor() {
        let img = Array3::from_elem((40, 70, 3), 255u8);
        let p = prepare_image(&img, 64);
        assert_eq!(p.tensor.shape(), &[1, 3, 64, 64]);
        assert_eq!((p.height, p.width), (37, 64));
        let d = p.tensor.data();
        assert_eq!(d[0], 2.0);
        assert_eq!(d[63 * 64], 0.0);
    }

    #[test]
    fn mask_target_of_full_box_is_ones() {
        let mask = BinaryMask::from_fn(16, 16, |(r, c)| (4..12).contains(&r) && (2..10).contains(&c));
        let t = mask_target(&mask, &BBox::new(2.0, 4.0, 10.0, 12.0), 28).unwrap();
        assert!(t.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn init_is_deterministic_and_reloadable() {
        for kind in [BackboneKind::ResnetFpn, BackboneKind::APanet, BackboneKind::Hrnet] {
            let cfg = ModelConfig::toy(kind);
            let a = MaskRcnn::new(cfg.clone(), 3).unwrap();
            let b = MaskRcnn::new(cfg.clone(), 3).unwrap();
            assert_eq!(a.params, b.params);
            MaskRcnn::from_params(cfg, a.params).unwrap();
        }
    }
}
