use super::{basic_block, check_input, stem, BackboneConfig, BackboneError, FeaturePyramid, PYRAMID_STRIDES};
use crate::nn::{Ctx, Var, WeightInit};

/// Residual stages C2..C5 at strides 4, 8, 16, 32 with widths
/// `base · 2^i`.
pub fn resnet_stages(ctx: &mut Ctx, cfg: &BackboneConfig, image: Var) -> Result<Vec<Var>, BackboneError> {
    check_input(ctx.g, image)?;
    let mut x = stem(ctx, image, cfg.base_channels);
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        let width = cfg.base_channels << i;
        for b in 0..cfg.depth {
            let stride = if i > 0 && b == 0 { 2 } else { 1 };
            x = basic_block(ctx, &format!("backbone.res{}.block{b}", i + 2), x, width, stride);
        }
        stages.push(x);
    }
    Ok(stages)
}

/// ResNet backbone plus FPN: lateral 1×1 projections, top-down ×2
/// nearest upsampling with addition, and a 3×3 output convolution per
/// level. Lateral and output convolutions carry no bias.
pub fn resnet_fpn_forward(ctx: &mut Ctx, cfg: &BackboneConfig, image: Var) -> Result<FeaturePyramid, BackboneError> {
    let stages = resnet_stages(ctx, cfg, image)?;
    let out = cfg.out_channels;
    let laterals: Vec<Var> = stages
        .iter()
        .enumerate()
        .map(|(i, &c)| ctx.conv(&format!("neck.fpn.lateral{}", i + 2), c, out, 1, 1, false, WeightInit::HE))
        .collect();
    let mut merged = vec![laterals[3]; 4];
    for i in (0..3).rev() {
        let up = ctx.g.upsample(merged[i + 1], 2);
        merged[i] = ctx.g.add(laterals[i], up);
    }
    let levels = merged
        .iter()
        .enumerate()
        .map(|(i, &m)| ctx.conv(&format!("neck.fpn.output{}", i + 2), m, out, 3, 1, false, WeightInit::HE))
        .collect();
    let pyramid = FeaturePyramid {
        levels,
        strides: PYRAMID_STRIDES.to_vec(),
    };
    pyramid.validate(ctx.g)?;
    Ok(pyramid)
}
