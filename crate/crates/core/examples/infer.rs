//! Trains a toy model briefly, saves the checkpoint, reloads it and writes
//! detection records and overlays for a few images.
//!
//! ```text
//! cargo run --release --example infer -- [out_dir] [epochs]
//! ```

use std::path::PathBuf;

use crackseg::augment::AugmentPolicy;
use crackseg::backbones::BackboneKind;
use crackseg::dataset::synthetic::{generate, SyntheticSpec};
use crackseg::pipeline::{infer, rle_decode, train, Checkpoint, InferRecord, RunConfig, LAST_CHECKPOINT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("detections"));
    let epochs: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(60);

    let dir = tempfile::tempdir()?;
    let data = generate(&SyntheticSpec { num_images: 4, crack_free: 1, ..Default::default() }, &dir.path().join("data"))?;
    let config = RunConfig {
        lr: 0.01,
        batch_size: 1,
        epochs,
        augment: AugmentPolicy::identity(),
        ..RunConfig::toy(BackboneKind::APanet)
    };
    train(&config, &data, None, &dir.path().join("run"), None)?;
    let checkpoint = Checkpoint::load(&dir.path().join("run").join(LAST_CHECKPOINT))?;

    let images: Vec<PathBuf> = data.records().iter().map(|r| data.image_path(r)).collect();
    let summary = infer(&checkpoint, &images, &config, &out)?;
    for (json, overlay) in &summary.written {
        let record: InferRecord = serde_json::from_str(&std::fs::read_to_string(json)?)?;
        let pixels: Vec<usize> = record.detections.iter().map(|d| rle_decode(&d.mask).map(|m| m.count())).collect::<Result<_, _>>()?;
        println!("{} -> {} detection(s), mask pixels {pixels:?}, overlay {}", record.image, record.detections.len(), overlay.display());
    }
    Ok(())
}
