//! Feature extractors and necks producing a [`FeaturePyramid`].
//!
//! * `resnet_fpn`: residual backbone with a top-down feature pyramid.
//! * `a_panet`: the same pyramid followed by a bottom-up augmentation path
//!   and, when enabled, a spatial attention gate on every output level.
//! * `hrnet`: four-stage multi-resolution network with repeated
//!   cross-branch fusion.

mod hrnet;
mod panet;
mod resnet_fpn;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Ctx, Graph, Var, WeightInit};

pub use hrnet::{hrnet_branches, hrnet_forward, hrnet_fuse, HRNET_STAGES};
pub use panet::{adaptive_feature_pooling, panet_bottom_up, spatial_attention};
pub use resnet_fpn::{resnet_fpn_forward, resnet_stages};

/// Strides of the four pyramid levels every backbone emits.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Input sides must be multiples of the coarsest stride.
pub const INPUT_DIVISOR: usize = 32;

/// Gain applied to the last convolution of every residual branch so that
/// blocks start close to the identity.
pub(crate) const RESIDUAL_GAIN: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum BackboneError {
    #[error("input {height}x{width} is not divisible by {divisor}")]
    IndivisibleInput { height: usize, width: usize, divisor: usize },
    #[error("pyramid level {level} has {found} channels, expected {expected}")]
    ChannelMismatch { level: usize, found: usize, expected: usize },
    #[error("pyramid strides {0:?} are not strictly increasing powers of two")]
    BadStrides(Vec<usize>),
    #[error("degenerate roi ({x1}, {y1}, {x2}, {y2})")]
    DegenerateRoi { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ResnetFpn,
    APanet,
    Hrnet,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ResnetFpn => "resnet_fpn",
            Self::APanet => "a_panet",
            Self::Hrnet => "hrnet",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub base_channels: usize,
    /// Residual blocks per stage (per branch for HRNet).
    pub depth: usize,
    /// Channel count shared by every pyramid level.
    pub out_channels: usize,
    pub attention_enabled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::paper(BackboneKind::APanet)
    }
}

impl BackboneConfig {
    /// Nominal full-size widths (64-channel stem, 256-channel pyramid,
    /// three blocks per stage).
    pub fn paper(kind: BackboneKind) -> Self {
        Self {
            kind,
            base_channels: if kind == BackboneKind::Hrnet { 32 } else { 64 },
            depth: 3,
            out_channels: 256,
            attention_enabled: kind == BackboneKind::APanet,
        }
    }

    /// CPU-sized widths for tests and desk-scale runs.
    pub fn toy(kind: BackboneKind) -> Self {
        Self {
            kind,
            base_channels: 4,
            depth: 1,
            out_channels: 8,
            attention_enabled: kind == BackboneKind::APanet,
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.attention_enabled && self.kind != BackboneKind::APanet {
            return Err(BackboneError::InvalidConfig(format!(
                "attention_enabled requires kind a_panet, got {}",
                self.kind.as_str()
            )));
        }
        if self.base_channels == 0 || self.depth == 0 || self.out_channels == 0 {
            return Err(BackboneError::InvalidConfig(
                "base_channels, depth and out_channels must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Ordered multi-resolution feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn shapes(&self, g: &Graph) -> Vec<Vec<usize>> {
        self.levels.iter().map(|&v| g.shape(v).to_vec()).collect()
    }

    pub fn channels(&self, g: &Graph) -> usize {
        g.shape(self.levels[0])[1]
    }

    /// Strides strictly increasing powers of two, one channel count.
    pub fn validate(&self, g: &Graph) -> Result<(), BackboneError> {
        let ok = self.strides.len() == self.levels.len()
            && self.strides.iter().all(|s| s.is_power_of_two())
            && self.strides.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(BackboneError::BadStrides(self.strides.clone()));
        }
        check_channels(g, &self.levels)
    }
}

pub(crate) fn check_channels(g: &Graph, levels: &[Var]) -> Result<(), BackboneError> {
    let expected = g.shape(levels[0])[1];
    for (level, &v) in levels.iter().enumerate() {
        let found = g.shape(v)[1];
        if found != expected {
            return Err(BackboneError::ChannelMismatch { level, found, expected });
        }
    }
    Ok(())
}

pub(crate) fn check_input(g: &Graph, image: Var) -> Result<(), BackboneError> {
    let s = g.shape(image);
    let (height, width) = (s[2], s[3]);
    if height % INPUT_DIVISOR != 0 || width % INPUT_DIVISOR != 0 || height == 0 || width == 0 {
        return Err(BackboneError::IndivisibleInput {
            height,
            width,
            divisor: INPUT_DIVISOR,
        });
    }
    Ok(())
}

/// `relu(conv(relu(conv(x))) + shortcut(x))` with a 1×1 projection when the
/// shape changes.
pub(crate) fn basic_block(ctx: &mut Ctx, name: &str, x: Var, out: usize, stride: usize) -> Var {
    let inp = ctx.g.shape(x)[1];
    let h = ctx.conv(&format!("{name}.conv1"), x, out, 3, stride, true, WeightInit::HE);
    let h = ctx.g.relu(h);
    let h = ctx.conv(
        &format!("{name}.conv2"),
        h,
        out,
        3,
        1,
        true,
        WeightInit::He { gain: RESIDUAL_GAIN },
    );
    let shortcut = if stride != 1 || inp != out {
        ctx.conv(&format!("{name}.proj"), x, out, 1, stride, false, WeightInit::HE)
    } else {
        x
    };
    let sum = ctx.g.add(h, shortcut);
    ctx.g.relu(sum)
}

/// Two stride-2 3×3 convolutions: input stride 4.
pub(crate) fn stem(ctx: &mut Ctx, x: Var, channels: usize) -> Var {
    let h = ctx.conv("backbone.stem1", x, channels, 3, 2, true, WeightInit::HE);
    let h = ctx.g.relu(h);
    let h = ctx.conv("backbone.stem2", h, channels, 3, 2, true, WeightInit::HE);
    ctx.g.relu(h)
}

/// Runs the configured backbone and neck on `image [1, 3, H, W]`.
pub fn backbone_forward(ctx: &mut Ctx, cfg: &BackboneConfig, image: Var) -> Result<FeaturePyramid, BackboneError> {
    cfg.validate()?;
    match cfg.kind {
        BackboneKind::ResnetFpn => resnet_fpn_forward(ctx, cfg, image),
        BackboneKind::APanet => {
            let p = resnet_fpn_forward(ctx, cfg, image)?;
            let mut n = panet_bottom_up(ctx, &p)?;
            if cfg.attention_enabled {
                for (l, level) in n.levels.iter_mut().enumerate() {
                    *level = spatial_attention(ctx, &format!("neck.attention{}", l + 2), *level);
                }
            }
            Ok(n)
        }
        BackboneKind::Hrnet => hrnet_forward(ctx, cfg, image),
    }
}
