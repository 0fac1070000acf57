use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io_error, Checkpoint, PipelineError, RunConfig};
use crate::dataset::CRACK_CATEGORY_NAME;
use crate::geometry::BinaryMask;
use crate::heads::Detection;
use crate::model::{image_to_array, MaskRcnn};

const MASK_COLOR: [u8; 3] = [255, 0, 0];
const BOX_COLOR: [u8; 3] = [0, 255, 0];

/// Run-length encoded binary mask: row-major run lengths, alternating and
/// starting with a run of zeros (possibly empty).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for &v in mask.0.iter() {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Rle {
        size: [mask.height(), mask.width()],
        counts,
    }
}

pub fn rle_decode(rle: &Rle) -> Result<BinaryMask, PipelineError> {
    let [h, w] = rle.size;
    let total: usize = rle.counts.iter().sum();
    if total != h * w {
        return Err(PipelineError::BadRle(format!("runs cover {total} pixels, mask has {}", h * w)));
    }
    let mut flat = Vec::with_capacity(total);
    for (i, &n) in rle.counts.iter().enumerate() {
        flat.extend(std::iter::repeat_n(i % 2 == 1, n));
    }
    let mut k = 0;
    Ok(BinaryMask::from_fn(h, w, |_| {
        k += 1;
        flat[k - 1]
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferDetection {
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    pub category: String,
    pub mask: Rle,
}

/// Detection file contents for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<InferDetection>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferSummary {
    /// `(detection record, overlay)` per processed image, in input order.
    pub written: Vec<(PathBuf, PathBuf)>,
    /// Images that could not be read or processed.
    pub failures: Vec<(PathBuf, String)>,
}

/// Masks blended at half opacity, then one-pixel box outlines, in a color
/// distinct from the masks.
pub fn render_overlay(image: &RgbImage, detections: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = out.dimensions();
    for d in detections {
        for ((r, c), &on) in d.mask.0.indexed_iter() {
            if on && (c as u32) < w && (r as u32) < h {
                let p = out.get_pixel_mut(c as u32, r as u32);
                for k in 0..3 {
                    p[k] = ((p[k] as u16 + MASK_COLOR[k] as u16) / 2) as u8;
                }
            }
        }
    }
    for d in detections {
        let b = d.bbox;
        let x1 = (b.x1.floor().max(0.0) as u32).min(w - 1);
        let y1 = (b.y1.floor().max(0.0) as u32).min(h - 1);
        let x2 = ((b.x2.ceil() as u32).max(1) - 1).min(w - 1);
        let y2 = ((b.y2.ceil() as u32).max(1) - 1).min(h - 1);
        for x in x1..=x2 {
            out.put_pixel(x, y1, Rgb(BOX_COLOR));
            out.put_pixel(x, y2, Rgb(BOX_COLOR));
        }
        for y in y1..=y2 {
            out.put_pixel(x1, y, Rgb(BOX_COLOR));
            out.put_pixel(x2, y, Rgb(BOX_COLOR));
        }
    }
    out
}

pub fn infer(checkpoint: &Checkpoint, paths: &[PathBuf], config: &RunConfig, out_dir: &Path) -> Result<InferSummary, PipelineError> {
    let model = MaskRcnn::from_params(checkpoint.config.model_config(), checkpoint.params.clone())?;
    infer_model(&model, paths, config, out_dir)
}

fn output_stem(path: &Path, index: usize, paths: &[PathBuf]) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("image{index}"));
    let clashes = paths.iter().filter(|p| p.file_stem() == path.file_stem()).count() > 1;
    if clashes {
        format!("{index:04}_{stem}")
    } else {
        stem
    }
}

fn infer_one(model: &MaskRcnn, path: &Path, stem: &str, config: &RunConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf), String> {
    let rgb = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let dets = model.predict(&image_to_array(&rgb), &config.predict_config()).map_err(|e| e.to_string())?;
    let record = InferRecord {
        image: path.display().to_string(),
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        detections: dets
            .iter()
            .map(|d| InferDetection {
                bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
                score: d.score,
                category: CRACK_CATEGORY_NAME.to_string(),
                mask: rle_encode(&d.mask),
            })
            .collect(),
    };
    let json_path = out_dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&record).expect("InferRecord serializes");
    std::fs::write(&json_path, text + "\n").map_err(|e| format!("{}: {e}", json_path.display()))?;
    let overlay_path = out_dir.join(format!("{stem}.overlay.png"));
    render_overlay(&rgb, &dets)
        .save(&overlay_path)
        .map_err(|e| format!("{}: {e}", overlay_path.display()))?;
    Ok((json_path, overlay_path))
}

/// Writes `<stem>.json` and `<stem>.overlay.png` per image. Unreadable
/// images are logged and reported in the summary; the rest are processed.
pub fn infer_model(model: &MaskRcnn, paths: &[PathBuf], config: &RunConfig, out_dir: &Path) -> Result<InferSummary, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let results: Vec<Result<(PathBuf, PathBuf), String>> = paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| infer_one(model, p, &output_stem(p, i, paths), config, out_dir))
        .collect();
    let mut summary = InferSummary::default();
    for (p, r) in paths.iter().zip(results) {
        match r {
            Ok(w) => summary.written.push(w),
            Err(e) => {
                error!("skipping {}: {e}", p.display());
                summary.failures.push((p.clone(), e));
            }
        }
    }
    Ok(summary)
}
