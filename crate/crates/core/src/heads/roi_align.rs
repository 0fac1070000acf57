use std::sync::Arc;

use super::HeadError;
use crate::geometry::BBox;
use crate::nn::ops::RoiTaps;
use crate::nn::{Graph, Tensor, Var};

/// RoIAlign on one feature map `[C, H, W]` (or `[1, C, H, W]`).
///
/// The RoI is given in input pixels and mapped onto the grid by
/// `spatial_scale`. Each of the `output × output` bins averages
/// `samples_per_bin²` bilinear samples at regular positions inside the bin;
/// coordinates are never quantised. Returns `[C, output, output]`.
pub fn roi_align(
    feature: &Tensor,
    roi: &BBox,
    spatial_scale: f64,
    output: usize,
    samples_per_bin: usize,
) -> Result<Tensor, HeadError> {
    if roi.is_degenerate() {
        return Err(HeadError::DegenerateRoi(*roi));
    }
    let feature = match feature.shape().len() {
        3 => {
            let s = feature.shape();
            feature.clone().reshape(&[1, s[0], s[1], s[2]])
        }
        _ => feature.clone(),
    };
    let (_, c, h, w) = feature.dims4();
    let taps = RoiTaps::new(std::slice::from_ref(roi), spatial_scale, h, w, output, samples_per_bin);
    Ok(taps.forward(&feature).reshape(&[c, output, output]))
}

/// Graph RoIAlign of many RoIs on one level; output `[R, C, k, k]`.
pub(crate) fn roi_align_var(g: &mut Graph, feature: Var, stride: usize, rois: &[BBox], output: usize, samples: usize) -> Var {
    let (_, _, h, w) = g.value(feature).dims4();
    let taps = RoiTaps::new(rois, 1.0 / stride as f64, h, w, output, samples);
    g.roi_align(feature, Arc::new(taps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_preserved() {
        let f = Tensor::full(&[2, 5, 7], 3.25);
        for roi in [BBox::new(1.0, 1.0, 20.0, 11.0), BBox::new(0.3, 2.7, 4.1, 9.9)] {
            let out = roi_align(&f, &roi, 0.25, 7, 2).unwrap();
            assert_eq!(out.shape(), &[2, 7, 7]);
            assert!(out.data().iter().all(|&v| v == 3.25));
        }
    }

    #[test]
    fn center_sample_of_two_by_two_map() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = roi_align(&f, &BBox::new(0.0, 0.0, 2.0, 2.0), 1.0, 1, 1).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn degenerate_roi_rejected() {
        let f = Tensor::zeros(&[1, 4, 4]);
        assert!(roi_align(&f, &BBox::new(1.0, 1.0, 1.0, 3.0), 1.0, 2, 2).is_err());
    }
}
