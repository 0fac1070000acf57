//! Writes a synthetic crack dataset in COCO polygon format, validates it
//! and shows the deterministic train/val/test split.
//!
//! ```text
//! cargo run --example dataset -- [out_dir] [num_images]
//! crackseg validate-data --set data.annotations=<out_dir>/annotations.json
//! ```

use std::path::PathBuf;

use crackseg::dataset::synthetic::{generate, SyntheticSpec};
use crackseg::dataset::{load_coco, split_dataset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("data/synthetic"));
    let n: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(20);

    generate(
        &SyntheticSpec {
            num_images: n,
            crack_free: n / 4,
            max_cracks_per_image: 2,
            seed: 42,
            ..Default::default()
        },
        &out,
    )?;
    let ann = out.join("annotations.json");
    let all = load_coco(&ann, &out)?;
    all.check_files()?;
    println!("{}: {} images, {} instances, digest {}", ann.display(), all.len(), all.num_instances(), all.digest());

    let (train, val, test) = split_dataset(&all, (0.8, 0.1), 0)?;
    for s in [&train, &val, &test] {
        let ids: Vec<u64> = s.records().iter().map(|r| r.id).collect();
        println!("{:?}: {} images {:?}", s.name, s.len(), ids);
    }
    Ok(())
}
