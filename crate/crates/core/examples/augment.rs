//! Draws a few augmentations of one synthetic sample and writes each with
//! its masks and boxes drawn on top.
//!
//! ```text
//! cargo run --example augment -- [out_dir] [draws]
//! ```

use std::path::PathBuf;

use crackseg::augment::{apply, AugmentPolicy};
use crackseg::dataset::synthetic::{generate, SyntheticSpec};
use crackseg::dataset::Category;
use crackseg::heads::Detection;
use image::{Rgb, RgbImage};
use ndarray::Array3;
use crackseg::pipeline::{load_sample, render_overlay};

fn to_image(a: &Array3<u8>) -> RgbImage {
    let (h, w, _) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([a[[r, c, 0]], a[[r, c, 1]], a[[r, c, 2]]])
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("augment_preview"));
    let draws: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(6);
    std::fs::create_dir_all(&out)?;

    let dir = tempfile::tempdir()?;
    let data = generate(
        &SyntheticSpec {
            num_images: 1,
            max_cracks_per_image: 2,
            seed: 3,
            ..Default::default()
        },
        dir.path(),
    )?;
    let record = &data.records()[0];
    let sample = load_sample(&data, record)?;
    let policy = AugmentPolicy::default();
    for epoch in 0..draws {
        let drawn = apply(&policy, sample.clone(), &mut policy.rng_for(epoch, record.id))?;
        let s = drawn.sample;
        let shown: Vec<Detection> = s
            .masks
            .iter()
            .zip(&s.boxes)
            .map(|(m, b)| Detection {
                bbox: *b,
                score: 1.0,
                class: Category::Crack,
                mask: m.clone(),
                raw_mask: Vec::new(),
                mask_size: 0,
            })
            .collect();
        let path = out.join(format!("draw{epoch}.png"));
        render_overlay(&to_image(&s.image), &shown).save(&path)?;
        let boxes: Vec<[f64; 4]> = s.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect();
        println!("{}: {}x{} boxes {boxes:?}{}", path.display(), s.width(), s.height(), if drawn.emptied { " (emptied)" } else { "" });
    }
    Ok(())
}
