//! Feature pyramid shapes and parameter counts of the three backbones.
//!
//! ```text
//! cargo run --release --example backbones -- [size] [--paper]
//! ```

use crackseg::backbones::{backbone_forward, hrnet_branches, BackboneConfig, BackboneKind};
use crackseg::nn::{Ctx, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let paper = args.iter().any(|a| a == "--paper");
    let size: usize = args.iter().skip(1).find(|a| !a.starts_with("--")).map(|s| s.parse()).transpose()?.unwrap_or(128);

    for kind in [BackboneKind::ResnetFpn, BackboneKind::APanet, BackboneKind::Hrnet] {
        let cfg = if paper { BackboneConfig::paper(kind) } else { BackboneConfig::toy(kind) };
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let mut ctx = Ctx::initializing(&mut g, &mut store, &mut rng);
        let x = ctx.constant(Tensor::zeros(&[1, 3, size, size]));
        if kind == BackboneKind::Hrnet {
            let branches = hrnet_branches(&mut ctx, &cfg, x)?;
            let shapes: Vec<_> = branches.iter().map(|&b| ctx.g.shape(b).to_vec()).collect();
            println!("hrnet stage-4 branches {shapes:?}");
        }
        let pyramid = backbone_forward(&mut ctx, &cfg, x)?;
        println!("{} at {size}x{size}:", kind.as_str());
        for (shape, stride) in pyramid.shapes(ctx.g).iter().zip(&pyramid.strides) {
            println!("  stride {stride:>2}: {shape:?}");
        }
        println!("  {} parameters", store.numel());
    }
    Ok(())
}
