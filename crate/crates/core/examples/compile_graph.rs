//! Builds one genotype into each broad variant and prints layer and parameter
//! summaries, plus the channel allocation of the GAP head.
//!
//! `cargo run --release --example compile_graph -- [genotype-file]`

use broadnas::builder::{build_graph, ArchConfig, Variant};
use broadnas::cell::{parse_genotype, Grammar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let genotype = match std::env::args().nth(1) {
        Some(path) => parse_genotype(&std::fs::read_to_string(path)?)?,
        None => Grammar::FULL.random_genotype(&mut ChaCha8Rng::seed_from_u64(1)),
    };
    println!("{genotype}");
    for variant in [Variant::Bnas, Variant::Ccle, Variant::Cce] {
        for (u, k, v) in [(2, 0, 2), (2, 1, 1), (2, 2, 2)] {
            let cfg = ArchConfig { variant, u, k, v, ..ArchConfig::default() };
            let g = build_graph(&genotype, &cfg)?;
            println!(
                "{:5} u={u} k={k} v={v}  layers {:4}  parameters {:9}  gap channels {:?}",
                variant.name(),
                g.layers.len(),
                g.parameter_count(),
                g.gap_plan.allocations()
            );
        }
    }
    let cfg =
        ArchConfig { variant: Variant::Cce, k: 1, v: 2, c0: 4, input_shape: [3, 16, 16], ..ArchConfig::default() };
    println!("\n{}", build_graph(&genotype, &cfg)?.dump());
    Ok(())
}
