//! Building blocks of the detection heads on hand-made inputs: anchors,
//! box deltas, non-maximum suppression and RoIAlign.
//!
//! ```text
//! cargo run --example heads
//! ```

use crackseg::geometry::BBox;
use crackseg::heads::{generate_anchors, nms, roi_align, BoxCoder, LevelShape};
use crackseg::nn::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let levels = [
        LevelShape { height: 8, width: 8, stride: 4 },
        LevelShape { height: 4, width: 4, stride: 8 },
    ];
    let anchors = generate_anchors(&levels, &[8.0], &[0.5, 1.0, 2.0]);
    println!("{} anchors; first three:", anchors.len());
    for a in anchors.iter().step_by(64).take(3) {
        println!("  level {} {:?}", a.level, a.bbox);
    }

    let anchor = BBox::new(8.0, 8.0, 40.0, 24.0);
    let crack = BBox::new(10.0, 5.0, 46.0, 20.0);
    let deltas = BoxCoder::HEAD.encode(&anchor, &crack);
    println!("deltas {deltas:.3?} decode back to {:?}", BoxCoder::HEAD.decode(&anchor, deltas));

    let boxes = [
        BBox::new(0.0, 0.0, 10.0, 10.0),
        BBox::new(1.0, 1.0, 11.0, 11.0),
        BBox::new(20.0, 20.0, 30.0, 30.0),
        BBox::new(0.0, 0.0, 10.0, 9.0),
    ];
    let keep = nms(&boxes, &[0.9, 0.8, 0.7, 0.95], 0.5);
    println!("nms keeps {keep:?}");

    // On a horizontal ramp each pooled bin reads back the x coordinate of
    // its centre in feature units: expect [2, 5, 2, 5].
    let (h, w) = (8, 8);
    let ramp = Tensor::from_vec(&[1, h, w], (0..h * w).map(|i| (i % w) as f64).collect());
    let pooled = roi_align(&ramp, &BBox::new(2.0, 2.0, 14.0, 14.0), 0.5, 2, 4)?;
    println!("roi_align over a ramp at stride 2: {:?}", pooled.data());
    Ok(())
}
