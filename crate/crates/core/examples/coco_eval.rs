//! COCO-style box and mask AP plus image-level counts on a hand-built set
//! of ground truth and detections.
//!
//! ```text
//! cargo run --example coco_eval
//! ```

use std::collections::BTreeMap;

use crackseg::geometry::{BBox, BinaryMask};
use crackseg::metrics::{coco_ap, confusion, prf_accuracy, ApVariant, EvalImage, GroundTruth, ScoredInstance};

fn rect(b: &BBox) -> BinaryMask {
    BinaryMask::from_fn(64, 64, |(r, c)| {
        (r as f64) >= b.y1 && (r as f64) < b.y2 && (c as f64) >= b.x1 && (c as f64) < b.x2
    })
}

fn gt(b: BBox) -> GroundTruth {
    GroundTruth { bbox: b, mask: rect(&b) }
}

fn det(b: BBox, score: f64) -> ScoredInstance {
    ScoredInstance { bbox: b, mask: rect(&b), score }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let images = vec![
        EvalImage {
            image_id: 1,
            ground_truth: vec![gt(BBox::new(4.0, 10.0, 60.0, 18.0))],
            detections: vec![det(BBox::new(5.0, 10.0, 58.0, 19.0), 0.92), det(BBox::new(30.0, 30.0, 40.0, 60.0), 0.31)],
        },
        EvalImage {
            image_id: 2,
            ground_truth: vec![gt(BBox::new(20.0, 2.0, 28.0, 62.0)), gt(BBox::new(2.0, 40.0, 30.0, 48.0))],
            detections: vec![det(BBox::new(19.0, 4.0, 29.0, 50.0), 0.77)],
        },
        EvalImage {
            image_id: 3,
            ground_truth: vec![],
            detections: vec![det(BBox::new(10.0, 10.0, 20.0, 20.0), 0.55)],
        },
    ];
    for variant in [ApVariant::Box, ApVariant::Mask] {
        let r = coco_ap(&images, variant)?;
        println!(
            "{:<4} AP {:5.1}  AP50 {:5.1}  AP75 {:5.1}  APS {:?} APM {:?} APL {:?}",
            variant.as_str(),
            r.ap,
            r.ap50,
            r.ap75,
            r.ap_s,
            r.ap_m,
            r.ap_l
        );
    }

    let scores: BTreeMap<u64, Vec<f64>> = images.iter().map(|i| (i.image_id, i.detections.iter().map(|d| d.score).collect())).collect();
    let labels: BTreeMap<u64, bool> = images.iter().map(|i| (i.image_id, !i.ground_truth.is_empty())).collect();
    for threshold in [0.5, 0.6] {
        let c = confusion(&scores, &labels, threshold)?;
        let p = prf_accuracy(&c)?;
        println!("threshold {threshold}: {c:?} accuracy {:.2} recall {:?} precision {:?}", p.accuracy, p.recall, p.precision);
    }
    Ok(())
}
