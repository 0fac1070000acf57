//! Trains the three backbones on the same synthetic split and prints the
//! comparison tables, as the `report` command does for stored evaluations.
//!
//! ```text
//! cargo run --release --example compare_backbones -- [epochs]
//! ```

use crackseg::augment::AugmentPolicy;
use crackseg::backbones::BackboneKind;
use crackseg::dataset::split_dataset;
use crackseg::dataset::synthetic::{generate, SyntheticSpec};
use crackseg::metrics::compare_report;
use crackseg::pipeline::{evaluate, train, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let epochs: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(15);

    let dir = tempfile::tempdir()?;
    let all = generate(
        &SyntheticSpec {
            num_images: 24,
            crack_free: 6,
            seed: 9,
            ..Default::default()
        },
        &dir.path().join("data"),
    )?;
    let (train_split, val, test) = split_dataset(&all, (0.6, 0.2), 0)?;
    let mut reports = Vec::new();
    for kind in [BackboneKind::ResnetFpn, BackboneKind::APanet, BackboneKind::Hrnet] {
        let config = RunConfig {
            lr: 0.01,
            epochs,
            augment: AugmentPolicy::default(),
            ..RunConfig::toy(kind)
        };
        let out = train(&config, &train_split, Some(&val), &dir.path().join(kind.as_str()), None)?;
        reports.push(evaluate(&out.last, &test, &config, kind.as_str())?);
    }
    print!("{}", compare_report(&reports)?);
    Ok(())
}
