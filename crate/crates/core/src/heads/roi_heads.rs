use super::roi_align::roi_align_var;
use super::{HeadConfig, HeadError};
use crate::backbones::{adaptive_feature_pooling, FeaturePyramid};
use crate::geometry::{BBox, BinaryMask};
use crate::nn::{Ctx, Graph, Var, WeightInit};

/// How RoI features are taken from the pyramid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pooling {
    /// One level per RoI, chosen from its size:
    /// `⌊level₀ + log₂(√area / scale₀)⌋` clamped to the pyramid (finest
    /// level is level 2).
    Assigned { canonical_scale: f64, canonical_level: i32 },
    /// Every level, fused by element-wise maximum.
    Adaptive,
}

pub fn assign_level(roi: &BBox, canonical_scale: f64, canonical_level: i32, num_levels: usize) -> usize {
    let size = roi.area().sqrt();
    let k = (canonical_level as f64 + (size / canonical_scale + 1e-8).log2()).floor() as i32;
    (k - 2).clamp(0, num_levels as i32 - 1) as usize
}

/// Pools `rois` into `[R, C, output, output]`.
pub fn pool_rois(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    rois: &[BBox],
    output: usize,
    samples: usize,
    pooling: Pooling,
) -> Result<Var, HeadError> {
    if let Some(r) = rois.iter().find(|r| r.is_degenerate()) {
        return Err(HeadError::DegenerateRoi(*r));
    }
    match pooling {
        Pooling::Adaptive => Ok(adaptive_feature_pooling(g, pyramid, rois, output, samples)?),
        Pooling::Assigned {
            canonical_scale,
            canonical_level,
        } => {
            let levels: Vec<usize> = rois
                .iter()
                .map(|r| assign_level(r, canonical_scale, canonical_level, pyramid.levels.len()))
                .collect();
            let c = pyramid.channels(g);
            let block = c * output * output;
            let mut parts = Vec::new();
            let mut position = vec![0usize; rois.len()];
            let mut next = 0;
            for l in 0..pyramid.levels.len() {
                let members: Vec<usize> = (0..rois.len()).filter(|&i| levels[i] == l).collect();
                if members.is_empty() {
                    continue;
                }
                let group: Vec<BBox> = members.iter().map(|&i| rois[i]).collect();
                parts.push(roi_align_var(g, pyramid.levels[l], pyramid.strides[l], &group, output, samples));
                for &i in &members {
                    position[i] = next;
                    next += 1;
                }
            }
            if parts.len() == 1 && position.iter().enumerate().all(|(i, &p)| i == p) {
                return Ok(parts[0]);
            }
            let flat = g.concat(parts);
            let index: Vec<usize> = position
                .iter()
                .flat_map(|&p| (p * block)..((p + 1) * block))
                .collect();
            let gathered = g.gather(flat, index);
            Ok(g.reshape(gathered, &[rois.len(), c, output, output]))
        }
    }
}

/// Two hidden fully connected layers, then class logits `[R, 2]`
/// (background, crack) and class-specific box deltas `[R, 4]`.
pub fn box_head(ctx: &mut Ctx, cfg: &HeadConfig, pooled: Var) -> (Var, Var) {
    let s = ctx.g.shape(pooled).to_vec();
    let flat = ctx.g.reshape(pooled, &[s[0], s[1] * s[2] * s[3]]);
    let h = ctx.linear("box_head.fc1", flat, cfg.box_hidden, WeightInit::HE);
    let h = ctx.g.relu(h);
    let h = ctx.linear("box_head.fc2", h, cfg.box_hidden, WeightInit::HE);
    let h = ctx.g.relu(h);
    let cls = ctx.linear("box_head.cls", h, 2, WeightInit::Normal { std: 0.01 });
    let deltas = ctx.linear("box_head.bbox", h, 4, WeightInit::Normal { std: 0.001 });
    (cls, deltas)
}

/// 3×3 conv stack, 2× transposed conv, class-agnostic 1×1 logit map
/// `[R, 1, m, m]`.
pub fn mask_head(ctx: &mut Ctx, cfg: &HeadConfig, pooled: Var) -> Var {
    let mut h = pooled;
    for i in 0..cfg.mask_convs {
        h = ctx.conv(&format!("mask_head.conv{i}"), h, cfg.mask_channels, 3, 1, true, WeightInit::HE);
        h = ctx.g.relu(h);
    }
    h = ctx.deconv2x2("mask_head.deconv", h, cfg.mask_channels, WeightInit::HE);
    h = ctx.g.relu(h);
    ctx.conv("mask_head.logits", h, 1, 1, 1, true, WeightInit::Normal { std: 0.05 })
}

/// Resamples an `m × m` probability grid into the box and binarises it.
///
/// A pixel is considered only if its center lies in the box; its value is
/// the bilinear interpolation of the grid at the matching RoI position
/// (edges clamped), compared with `threshold` using `≥`.
pub fn paste_mask(raw: &[f64], m: usize, bbox: &BBox, height: usize, width: usize, threshold: f64) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    let (bw, bh) = (bbox.width(), bbox.height());
    if bw <= 0.0 || bh <= 0.0 {
        return mask;
    }
    let c0 = (bbox.x1 - 0.5).ceil().max(0.0) as usize;
    let r0 = (bbox.y1 - 0.5).ceil().max(0.0) as usize;
    let sample = |u: f64, v: f64| {
        let u = u.clamp(0.0, (m - 1) as f64);
        let v = v.clamp(0.0, (m - 1) as f64);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(m - 1), (v0 + 1).min(m - 1));
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        raw[v0 * m + u0] * (1.0 - fu) * (1.0 - fv)
            + raw[v0 * m + u1] * fu * (1.0 - fv)
            + raw[v1 * m + u0] * (1.0 - fu) * fv
            + raw[v1 * m + u1] * fu * fv
    };
    for r in r0..height {
        let cy = r as f64 + 0.5;
        if cy >= bbox.y2 {
            break;
        }
        if cy < bbox.y1 {
            continue;
        }
        let v = (cy - bbox.y1) / bh * m as f64 - 0.5;
        for c in c0..width {
            let cx = c as f64 + 0.5;
            if cx >= bbox.x2 {
                break;
            }
            if cx < bbox.x1 {
                continue;
            }
            let u = (cx - bbox.x1) / bw * m as f64 - 0.5;
            if sample(u, v) >= threshold {
                mask.set(r, c, true);
            }
        }
    }
    mask
}
