//! Spatial augmentation that moves an image, its instance masks and their
//! boxes together.
//!
//! Only lossless transforms (flips, quarter turns) and crops are provided,
//! so mask/box agreement survives every transform exactly.

use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SceneLevel;
use crate::geometry::{BBox, BinaryMask};

/// Maximum distance between a box and the tight bounds of its mask.
pub const BOX_MASK_TOLERANCE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("tight bbox of an empty mask")]
    EmptyMask,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("inconsistent sample: {0}")]
    InconsistentSample(String),
}

/// One training image with its instances. `image` is `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Array3<u8>,
    pub masks: Vec<BinaryMask>,
    pub boxes: Vec<BBox>,
    pub scene_level: SceneLevel,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Checks shapes and that every box matches its mask within
    /// [`BOX_MASK_TOLERANCE`].
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.masks.len() != self.boxes.len() {
            return Err(AugmentError::InconsistentSample(format!(
                "{} masks vs {} boxes",
                self.masks.len(),
                self.boxes.len()
            )));
        }
        for (i, (m, b)) in self.masks.iter().zip(&self.boxes).enumerate() {
            if (m.height(), m.width()) != (self.height(), self.width()) {
                return Err(AugmentError::InconsistentSample(format!("mask {i} has the wrong shape")));
            }
            let tight = tight_bbox(m)?;
            if tight.max_abs_diff(b) > BOX_MASK_TOLERANCE {
                return Err(AugmentError::InconsistentSample(format!(
                    "box {i} {b:?} disagrees with mask bounds {tight:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    Hflip { p: f64 },
    Vflip { p: f64 },
    /// Quarter turn clockwise.
    Rotate90 { p: f64 },
    /// Crops a window whose sides are each a uniform fraction in
    /// `[min_fraction, 1]` of the image side.
    RandomCrop { p: f64, min_fraction: f64 },
}

impl AugmentOp {
    fn probability(&self) -> f64 {
        match *self {
            Self::Hflip { p } | Self::Vflip { p } | Self::Rotate90 { p } | Self::RandomCrop { p, .. } => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub ops: Vec<AugmentOp>,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            ops: vec![
                AugmentOp::Hflip { p: 0.5 },
                AugmentOp::Vflip { p: 0.5 },
                AugmentOp::Rotate90 { p: 0.25 },
                AugmentOp::RandomCrop { p: 0.3, min_fraction: 0.6 },
            ],
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self { ops: Vec::new(), seed: 0 }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for op in &self.ops {
            let p = op.probability();
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::InvalidPolicy(format!("probability {p} outside [0, 1]")));
            }
            if let AugmentOp::RandomCrop { min_fraction, .. } = *op {
                if !(min_fraction > 0.0 && min_fraction <= 1.0) {
                    return Err(AugmentError::InvalidPolicy(format!("min_fraction {min_fraction} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Independent generator for one draw, so that augmentation of a given
    /// image in a given epoch does not depend on worker scheduling.
    pub fn rng_for(&self, epoch: u64, image_id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ image_id);
        rng
    }
}

/// Result of [`apply`].
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub sample: Sample,
    /// The input had instances and cropping removed all of them; the caller
    /// should draw again.
    pub emptied: bool,
}

/// Smallest half-open box containing every set pixel.
pub fn tight_bbox(mask: &BinaryMask) -> Result<BBox, AugmentError> {
    mask.tight_bbox().ok_or(AugmentError::EmptyMask)
}

pub fn apply(policy: &AugmentPolicy, sample: Sample, rng: &mut impl Rng) -> Result<Augmented, AugmentError> {
    policy.validate()?;
    sample.validate()?;
    let had_instances = !sample.masks.is_empty();
    let mut s = sample;
    for op in &policy.ops {
        let fire = rng.random::<f64>() < op.probability();
        if !fire {
            continue;
        }
        s = match *op {
            AugmentOp::Hflip { .. } => hflip(s),
            AugmentOp::Vflip { .. } => vflip(s),
            AugmentOp::Rotate90 { .. } => rotate90(s),
            AugmentOp::RandomCrop { min_fraction, .. } => {
                let (h, w) = (s.height(), s.width());
                let fw: f64 = rng.random_range(min_fraction..=1.0);
                let fh: f64 = rng.random_range(min_fraction..=1.0);
                let cw = ((w as f64 * fw).round() as usize).clamp(1, w);
                let ch = ((h as f64 * fh).round() as usize).clamp(1, h);
                let x0 = rng.random_range(0..=w - cw);
                let y0 = rng.random_range(0..=h - ch);
                crop(s, x0, y0, cw, ch)
            }
        };
    }
    let emptied = had_instances && s.masks.is_empty();
    Ok(Augmented { sample: s, emptied })
}

pub fn hflip(s: Sample) -> Sample {
    let w = s.width() as f64;
    Sample {
        image: s.image.slice(s![.., ..;-1, ..]).to_owned(),
        masks: s.masks.into_iter().map(|m| BinaryMask(m.0.slice(s![.., ..;-1]).to_owned())).collect(),
        boxes: s.boxes.into_iter().map(|b| BBox::new(w - b.x2, b.y1, w - b.x1, b.y2)).collect(),
        scene_level: s.scene_level,
    }
}

pub fn vflip(s: Sample) -> Sample {
    let h = s.height() as f64;
    Sample {
        image: s.image.slice(s![..;-1, .., ..]).to_owned(),
        masks: s.masks.into_iter().map(|m| BinaryMask(m.0.slice(s![..;-1, ..]).to_owned())).collect(),
        boxes: s.boxes.into_iter().map(|b| BBox::new(b.x1, h - b.y2, b.x2, h - b.y1)).collect(),
        scene_level: s.scene_level,
    }
}

/// Clockwise quarter turn: `(x, y) → (H − y, x)`; output is `W × H`.
pub fn rotate90(s: Sample) -> Sample {
    let h = s.height() as f64;
    let mut image = s.image.permuted_axes([1, 0, 2]);
    image.invert_axis(Axis(1));
    Sample {
        image: image.as_standard_layout().to_owned(),
        masks: s
            .masks
            .into_iter()
            .map(|m| {
                let mut t = m.0.reversed_axes();
                t.invert_axis(Axis(1));
                BinaryMask(t.as_standard_layout().to_owned())
            })
            .collect(),
        boxes: s.boxes.into_iter().map(|b| BBox::new(h - b.y2, b.x1, h - b.y1, b.x2)).collect(),
        scene_level: s.scene_level,
    }
}

/// Crops `[x0, x0+w) × [y0, y0+h)`. Boxes are recomputed from the cropped
/// masks; instances with no remaining pixel are dropped.
pub fn crop(s: Sample, x0: usize, y0: usize, w: usize, h: usize) -> Sample {
    let image = s.image.slice(s![y0..y0 + h, x0..x0 + w, ..]).to_owned();
    let mut masks = Vec::new();
    let mut boxes = Vec::new();
    for m in s.masks {
        let cropped = BinaryMask(m.0.slice(s![y0..y0 + h, x0..x0 + w]).to_owned());
        if let Some(b) = cropped.tight_bbox() {
            masks.push(cropped);
            boxes.push(b);
        }
    }
    Sample {
        image,
        masks,
        boxes,
        scene_level: s.scene_level,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_bbox(m: &BinaryMask) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for r in 0..m.height() {
            for c in 0..m.width() {
                if m.get(r, c) {
                    any = true;
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c + 1);
                    y1 = y1.max(r + 1);
                }
            }
        }
        any.then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    fn rect_sample(h: usize, w: usize, rects: &[(usize, usize, usize, usize)]) -> Sample {
        let image = Array3::from_shape_fn((h, w, 3), |(r, c, k)| ((r * 7 + c * 3 + k) % 251) as u8);
        let masks: Vec<BinaryMask> = rects
            .iter()
            .map(|&(x1, y1, x2, y2)| BinaryMask::from_fn(h, w, |(r, c)| c >= x1 && c < x2 && r >= y1 && r < y2))
            .collect();
        let boxes = rects
            .iter()
            .map(|&(x1, y1, x2, y2)| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
            .collect();
        Sample {
            image,
            masks,
            boxes,
            scene_level: SceneLevel::Object,
        }
    }

    #[test]
    fn tight_bbox_cases() {
        let mut m = BinaryMask::new(8, 8);
        m.set(3, 5, true);
        assert_eq!(tight_bbox(&m).unwrap(), BBox::new(5.0, 3.0, 6.0, 4.0));
        let full = BinaryMask::from_fn(6, 9, |_| true);
        assert_eq!(tight_bbox(&full).unwrap(), BBox::new(0.0, 0.0, 9.0, 6.0));
        assert_eq!(tight_bbox(&BinaryMask::new(4, 4)), Err(AugmentError::EmptyMask));
    }

    #[test]
    fn hflip_reflects_box() {
        let s = rect_sample(80, 100, &[(10, 20, 30, 40)]);
        let out = hflip(s.clone());
        assert_eq!(out.boxes[0], BBox::new(70.0, 20.0, 90.0, 40.0));
        for r in 0..80 {
            for c in 0..100 {
                assert_eq!(out.masks[0].get(r, c), s.masks[0].get(r, 99 - c));
            }
        }
        assert_eq!(hflip(out), s);
    }

    #[test]
    fn rotate90_matches_pixelwise_rotation() {
        let s = rect_sample(80, 100, &[(10, 20, 30, 40)]);
        let out = rotate90(s.clone());
        assert_eq!(out.image.dim(), (100, 80, 3));
        // oracle: move every set pixel (r, c) to (c, H-1-r) and take bounds
        let mut moved = BinaryMask::new(100, 80);
        for r in 0..80 {
            for c in 0..100 {
                if s.masks[0].get(r, c) {
                    moved.set(c, 79 - r, true);
                }
                for k in 0..3 {
                    assert_eq!(out.image[(c, 79 - r, k)], s.image[(r, c, k)]);
                }
            }
        }
        assert_eq!(out.masks[0], moved);
        assert_eq!(out.boxes[0], brute_bbox(&moved).unwrap());
        assert_eq!(out.boxes[0], BBox::new(40.0, 10.0, 60.0, 30.0));
    }

    #[test]
    fn identity_policy_is_bit_identical() {
        let s = rect_sample(16, 20, &[(2, 3, 9, 7), (10, 1, 18, 15)]);
        let policy = AugmentPolicy {
            ops: vec![
                AugmentOp::Hflip { p: 0.0 },
                AugmentOp::Rotate90 { p: 0.0 },
                AugmentOp::RandomCrop { p: 0.0, min_fraction: 0.5 },
            ],
            seed: 3,
        };
        let out = apply(&policy, s.clone(), &mut policy.rng_for(0, 1)).unwrap();
        assert_eq!(out.sample, s);
        assert!(!out.emptied);
    }

    #[test]
    fn crop_drops_vanished_instances_and_flags_empty() {
        let s = rect_sample(20, 20, &[(0, 0, 4, 4), (12, 12, 18, 18)]);
        let out = crop(s.clone(), 10, 10, 10, 10);
        assert_eq!(out.masks.len(), 1);
        assert_eq!(out.boxes[0], BBox::new(2.0, 2.0, 8.0, 8.0));

        let policy = AugmentPolicy {
            ops: vec![AugmentOp::RandomCrop { p: 1.0, min_fraction: 0.05 }],
            seed: 0,
        };
        let tiny = rect_sample(40, 40, &[(0, 0, 2, 2)]);
        let mut saw_empty = false;
        for i in 0..64 {
            let out = apply(&policy, tiny.clone(), &mut policy.rng_for(0, i)).unwrap();
            out.sample.validate().unwrap();
            saw_empty |= out.emptied;
            assert_eq!(out.emptied, out.sample.masks.is_empty());
        }
        assert!(saw_empty);
    }

    #[test]
    fn invalid_policy_rejected() {
        let s = rect_sample(8, 8, &[]);
        let bad = AugmentPolicy {
            ops: vec![AugmentOp::Hflip { p: 1.5 }],
            seed: 0,
        };
        assert!(matches!(apply(&bad, s.clone(), &mut bad.rng_for(0, 0)), Err(AugmentError::InvalidPolicy(_))));
        let bad = AugmentPolicy {
            ops: vec![AugmentOp::RandomCrop { p: 0.5, min_fraction: 0.0 }],
            seed: 0,
        };
        assert!(apply(&bad, s, &mut bad.rng_for(0, 0)).is_err());
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| BinaryMask::from_fn(h, w, |(r, c)| bits[r * w + c]))
    }

    proptest! {
        #[test]
        fn tight_bbox_matches_brute_force(m in arb_mask(7, 11)) {
            prop_assert_eq!(tight_bbox(&m).ok(), brute_bbox(&m));
        }

        #[test]
        fn flips_and_rotation_preserve_counts(
            rects in proptest::collection::vec((0usize..20, 0usize..14, 1usize..8, 1usize..8), 0..4),
            seed in 0u64..1000,
        ) {
            let rects: Vec<_> = rects.into_iter().map(|(x, y, w, h)| (x, y, (x + w).min(24), (y + h).min(16))).collect();
            let s = rect_sample(16, 24, &rects);
            let policy = AugmentPolicy {
                ops: vec![AugmentOp::Hflip { p: 0.5 }, AugmentOp::Vflip { p: 0.5 }, AugmentOp::Rotate90 { p: 0.5 }],
                seed,
            };
            let out = apply(&policy, s.clone(), &mut policy.rng_for(1, 2)).unwrap();
            out.sample.validate().unwrap();
            for (a, b) in s.masks.iter().zip(&out.sample.masks) {
                prop_assert_eq!(a.count(), b.count());
            }
            let again = apply(&policy, s, &mut policy.rng_for(1, 2)).unwrap();
            prop_assert_eq!(again, out);
        }
    }
}
