//! Desk-scale training run: overfits a toy model to five synthetic images
//! and evaluates on the same images.
//!
//! ```text
//! cargo run --release --example overfit -- [a_panet|resnet_fpn|hrnet] [epochs]
//! ```

use crackseg::augment::AugmentPolicy;
use crackseg::backbones::BackboneKind;
use crackseg::dataset::synthetic::{generate, SyntheticSpec};
use crackseg::metrics::format_tables;
use crackseg::pipeline::{evaluate, train, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let kind = match args.get(1).map(String::as_str) {
        Some("hrnet") => BackboneKind::Hrnet,
        Some("resnet_fpn") => BackboneKind::ResnetFpn,
        _ => BackboneKind::APanet,
    };
    let epochs: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(60);

    let dir = tempfile::tempdir()?;
    let data = generate(
        &SyntheticSpec {
            num_images: 5,
            crack_free: 1,
            ..Default::default()
        },
        &dir.path().join("data"),
    )?;
    let config = RunConfig {
        lr: 0.01,
        batch_size: 1,
        epochs,
        augment: AugmentPolicy::identity(),
        ..RunConfig::toy(kind)
    };
    let out = train(&config, &data, None, &dir.path().join("run"), None)?;
    let report = evaluate(&out.last, &data, &config, kind.as_str())?;
    print!("{}", format_tables(&[report]));
    Ok(())
}
