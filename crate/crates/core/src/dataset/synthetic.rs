//! Procedurally generated crack images with exact polygon annotations.
//!
//! Used by the examples and the desk-scale training checks: each image is a
//! noisy concrete-like background with dark band-shaped cracks whose pixels
//! are produced by the same rasterizer that builds training masks.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    load_coco, polygon_bounds, rasterize_polygon, DatasetError, DatasetSplit, ImageRecord, InstanceAnnotation,
    SceneLevel, SplitName,
};

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub num_images: usize,
    /// How many of the images carry no crack at all (taken from the end).
    pub crack_free: usize,
    pub width: u32,
    pub height: u32,
    pub max_cracks_per_image: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_images: 5,
            crack_free: 0,
            width: 64,
            height: 64,
            max_cracks_per_image: 1,
            seed: 0,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v * 4.0).round() / 4.0
}

/// A straight band polygon with slightly jittered corners.
fn crack_polygon(rng: &mut impl Rng, width: f64, height: f64) -> Vec<(f64, f64)> {
    let margin = 4.0;
    loop {
        let angle = match rng.random_range(0..4) {
            0 => 0.0,
            1 => std::f64::consts::FRAC_PI_2,
            2 => std::f64::consts::FRAC_PI_4,
            _ => -std::f64::consts::FRAC_PI_4,
        } + rng.random_range(-0.15..0.15);
        let len = rng.random_range(0.35..0.65) * width.min(height);
        let half_t = rng.random_range(2.5..4.0);
        let cx = rng.random_range(margin + len / 2.0..width - margin - len / 2.0);
        let cy = rng.random_range(margin + len / 2.0..height - margin - len / 2.0);
        let (dx, dy) = (angle.cos(), angle.sin());
        let (nx, ny) = (-dy, dx);
        let hl = len / 2.0;
        let poly: Vec<(f64, f64)> = [(-hl, -half_t), (hl, -half_t * 0.8), (hl, half_t), (-hl, half_t * 0.9)]
            .iter()
            .map(|&(a, b)| (quantize(cx + a * dx + b * nx), quantize(cy + a * dy + b * ny)))
            .collect();
        let b = polygon_bounds(&poly);
        if b.x1 >= 1.0 && b.y1 >= 1.0 && b.x2 <= width - 1.0 && b.y2 <= height - 1.0 {
            return poly;
        }
    }
}

/// Writes `dir/images/NNNN.png` and `dir/annotations.json` (file names
/// relative to `dir`) and loads them back.
pub fn generate(spec: &SyntheticSpec, dir: &Path) -> Result<DatasetSplit, DatasetError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|source| DatasetError::Io {
        path: images_dir.clone(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut records = Vec::new();
    let mut annotations = Vec::new();
    let mut next_ann = 1;
    for i in 0..spec.num_images {
        let id = i as u64 + 1;
        let base: f64 = rng.random_range(150.0..200.0);
        let mut img = RgbImage::new(spec.width, spec.height);
        for (_, _, px) in img.enumerate_pixels_mut() {
            let v = (base + rng.random_range(-12.0..12.0)).clamp(0.0, 255.0) as u8;
            *px = Rgb([v, v, v.saturating_sub(4)]);
        }
        let cracks = if i < spec.num_images.saturating_sub(spec.crack_free) {
            rng.random_range(1..=spec.max_cracks_per_image.max(1))
        } else {
            0
        };
        for _ in 0..cracks {
            let poly = crack_polygon(&mut rng, w as f64, h as f64);
            let mask = rasterize_polygon(&poly, w, h);
            for ((r, c), &on) in mask.0.indexed_iter() {
                if on {
                    let v = rng.random_range(20.0..60.0) as u8;
                    img.put_pixel(c as u32, r as u32, Rgb([v, v, v]));
                }
            }
            annotations.push(InstanceAnnotation::from_polygon(next_ann, id, poly));
            next_ann += 1;
        }
        let file_path = format!("images/{id:04}.png");
        let path = dir.join(&file_path);
        img.save(&path).map_err(|e| DatasetError::ImageDecode {
            path: path.clone(),
            message: e.to_string(),
        })?;
        records.push(ImageRecord {
            id,
            file_path,
            width: spec.width,
            height: spec.height,
            scene_level: SceneLevel::Pixel,
        });
    }
    let split = DatasetSplit::new(SplitName::Train, PathBuf::from(dir), records, annotations)?;
    let ann_path = dir.join("annotations.json");
    split.write_coco(&ann_path)?;
    load_coco(&ann_path, dir)
}
