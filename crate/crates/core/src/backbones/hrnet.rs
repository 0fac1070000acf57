use super::{
    basic_block, check_input, stem, BackboneConfig, BackboneError, FeaturePyramid, PYRAMID_STRIDES, RESIDUAL_GAIN,
};
use crate::nn::{Ctx, Var, WeightInit};

pub const HRNET_STAGES: usize = 4;

const FUSE_INIT: WeightInit = WeightInit::He { gain: RESIDUAL_GAIN };

/// Exchanges information across all branch pairs.
///
/// Output branch `i` is `relu(Σ_j f_ij(x_j))` with `f_ii` the identity,
/// `f_ij` for a coarser `j` a 1×1 projection followed by nearest
/// upsampling, and for a finer `j` a chain of `i − j` stride-2 3×3
/// convolutions (ReLU between, none after the last). The layer producing
/// each cross-branch term is initialised with the residual gain, so fusion
/// starts close to the identity.
pub fn hrnet_fuse(ctx: &mut Ctx, prefix: &str, branches: &[Var]) -> Vec<Var> {
    let widths: Vec<usize> = branches.iter().map(|&b| ctx.g.shape(b)[1]).collect();
    let mut outputs = Vec::with_capacity(branches.len());
    for i in 0..branches.len() {
        let mut acc = branches[i];
        for j in 0..branches.len() {
            if i == j {
                continue;
            }
            let name = format!("{prefix}.fuse{i}_{j}");
            let term = if j > i {
                let p = ctx.conv(&format!("{name}.up"), branches[j], widths[i], 1, 1, false, FUSE_INIT);
                ctx.g.upsample(p, 1 << (j - i))
            } else {
                let steps = i - j;
                let mut h = branches[j];
                for t in 0..steps {
                    let last = t + 1 == steps;
                    let out = if last { widths[i] } else { widths[j] };
                    let init = if last { FUSE_INIT } else { WeightInit::HE };
                    h = ctx.conv(&format!("{name}.down{t}"), h, out, 3, 2, false, init);
                    if !last {
                        h = ctx.g.relu(h);
                    }
                }
                h
            };
            acc = ctx.g.add(acc, term);
        }
        outputs.push(ctx.g.relu(acc));
    }
    outputs
}

/// The four stage-4 branches at strides 4, 8, 16, 32 with widths
/// `base · 2^b`, before output projection.
pub fn hrnet_branches(ctx: &mut Ctx, cfg: &BackboneConfig, image: Var) -> Result<Vec<Var>, BackboneError> {
    check_input(ctx.g, image)?;
    let base = cfg.base_channels;
    let mut x = stem(ctx, image, base);
    for b in 0..cfg.depth {
        x = basic_block(ctx, &format!("backbone.stage1.branch0.block{b}"), x, base, 1);
    }
    let mut branches = vec![x];
    for stage in 2..=HRNET_STAGES {
        let coarsest = *branches.last().expect("at least one branch");
        let width = base << (stage - 1);
        let new = ctx.conv(&format!("backbone.transition{stage}"), coarsest, width, 3, 2, true, WeightInit::HE);
        branches.push(ctx.g.relu(new));
        for (bi, branch) in branches.iter_mut().enumerate() {
            let w = base << bi;
            for b in 0..cfg.depth {
                *branch = basic_block(ctx, &format!("backbone.stage{stage}.branch{bi}.block{b}"), *branch, w, 1);
            }
        }
        branches = hrnet_fuse(ctx, &format!("backbone.stage{stage}"), &branches);
    }
    Ok(branches)
}

/// HRNet with each stage-4 branch projected to `out_channels` by a 1×1
/// convolution without bias.
pub fn hrnet_forward(ctx: &mut Ctx, cfg: &BackboneConfig, image: Var) -> Result<FeaturePyramid, BackboneError> {
    let branches = hrnet_branches(ctx, cfg, image)?;
    let levels = branches
        .iter()
        .enumerate()
        .map(|(b, &x)| ctx.conv(&format!("backbone.out{b}"), x, cfg.out_channels, 1, 1, false, WeightInit::HE))
        .collect();
    let pyramid = FeaturePyramid {
        levels,
        strides: PYRAMID_STRIDES.to_vec(),
    };
    pyramid.validate(ctx.g)?;
    Ok(pyramid)
}
