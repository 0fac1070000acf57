#![allow(dead_code)]

use std::path::Path;

use crackseg::augment::AugmentPolicy;
use crackseg::backbones::BackboneKind;
use crackseg::dataset::synthetic::{generate, SyntheticSpec};
use crackseg::dataset::DatasetSplit;
use crackseg::pipeline::RunConfig;

/// Synthetic images under `dir`; the last `crack_free` carry no crack.
pub fn synthetic(dir: &Path, num_images: usize, crack_free: usize, seed: u64) -> DatasetSplit {
    generate(
        &SyntheticSpec {
            num_images,
            crack_free,
            seed,
            ..Default::default()
        },
        dir,
    )
    .expect("synthetic data")
}

/// Toy network, no augmentation, one image per step.
pub fn toy_config(kind: BackboneKind, epochs: u64) -> RunConfig {
    RunConfig {
        lr: 0.01,
        batch_size: 1,
        epochs,
        augment: AugmentPolicy::identity(),
        ..RunConfig::toy(kind)
    }
}
