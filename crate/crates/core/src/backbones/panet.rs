use super::{check_channels, BackboneError, FeaturePyramid};
use crate::geometry::BBox;
use crate::heads::roi_align::roi_align_var;
use crate::nn::{Ctx, Graph, Var, WeightInit};

/// Bottom-up path augmentation.
///
/// `N_2 = P_2` and `N_{l+1} = relu(conv3×3(relu(down(N_l)) + P_{l+1}))`,
/// where `down` is a stride-2 3×3 convolution. Output shapes and strides
/// equal the input's.
pub fn panet_bottom_up(ctx: &mut Ctx, pyramid: &FeaturePyramid) -> Result<FeaturePyramid, BackboneError> {
    check_channels(ctx.g, &pyramid.levels)?;
    let c = pyramid.channels(ctx.g);
    let mut levels = vec![pyramid.levels[0]];
    for l in 1..pyramid.levels.len() {
        let prev = levels[l - 1];
        let down = ctx.conv(&format!("neck.panet.down{}", l + 1), prev, c, 3, 2, false, WeightInit::HE);
        let down = ctx.g.relu(down);
        let sum = ctx.g.add(down, pyramid.levels[l]);
        let fused = ctx.conv(&format!("neck.panet.fuse{}", l + 2), sum, c, 3, 1, false, WeightInit::HE);
        levels.push(ctx.g.relu(fused));
    }
    Ok(FeaturePyramid {
        levels,
        strides: pyramid.strides.clone(),
    })
}

/// Spatial attention gate.
///
/// A 1×1 projection gives one logit per position; a softmax over all
/// `H·W` positions scaled by `H·W` gives a gate with mean exactly 1, which
/// multiplies every channel.
pub fn spatial_attention(ctx: &mut Ctx, name: &str, feature: Var) -> Var {
    let logits = ctx.conv(&format!("{name}.proj"), feature, 1, 1, 1, false, WeightInit::Normal { std: 0.01 });
    let gate = ctx.g.spatial_softmax(logits);
    ctx.g.channel_gate(feature, gate)
}

/// Pools every RoI from every pyramid level with RoIAlign and fuses the
/// per-level grids by element-wise maximum. Output `[R, C, k, k]`.
pub fn adaptive_feature_pooling(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    rois: &[BBox],
    output: usize,
    samples_per_bin: usize,
) -> Result<Var, BackboneError> {
    if let Some(r) = rois.iter().find(|r| r.is_degenerate()) {
        return Err(BackboneError::DegenerateRoi {
            x1: r.x1,
            y1: r.y1,
            x2: r.x2,
            y2: r.y2,
        });
    }
    let mut fused: Option<Var> = None;
    for (&level, &stride) in pyramid.levels.iter().zip(&pyramid.strides) {
        let pooled = roi_align_var(g, level, stride, rois, output, samples_per_bin);
        fused = Some(match fused {
            None => pooled,
            Some(f) => g.maximum(f, pooled),
        });
    }
    Ok(fused.expect("pyramid has at least one level"))
}
