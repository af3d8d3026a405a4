//! Trains one genotype for every (v, k) pair of the 3 x 3 grid on tiny synthetic
//! data and prints a parameter / accuracy table.
//!
//! `cargo run --release --example grid -- [epochs]`

use broadnas::builder::{ArchConfig, Sharing};
use broadnas::cell::Grammar;
use broadnas::data::{synthetic_dataset_with, AugmentSpec, Normalization, Split, SyntheticSpec};
use broadnas::search::{final_train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(3);
    let spec = SyntheticSpec::new(10, 500, 16, 9);
    let train = synthetic_dataset_with(&spec, Split::Train)?;
    let test = synthetic_dataset_with(&SyntheticSpec { n: 200, ..spec }, Split::Test)?;
    let norm = Normalization::from_dataset(&train);
    let genotype = Grammar::FULL.random_genotype(&mut ChaCha8Rng::seed_from_u64(9));
    println!("{genotype}");
    println!("  v  k  parameters  test acc");
    for v in 1..=3 {
        for k in 0..=2 {
            let cfg = TrainConfig {
                arch: ArchConfig {
                    v,
                    k,
                    c0: 4,
                    input_shape: [3, 16, 16],
                    sharing: Sharing::Standalone,
                    ..ArchConfig::default()
                },
                epochs,
                batch_size: 64,
                augment: AugmentSpec::standard(),
                seed: 9,
                ..TrainConfig::default()
            };
            let (_, r) = final_train(&genotype, &cfg, &train, &test, &norm, |_| {})?;
            println!("  {v}  {k}  {:10}  {:.3}", r.parameters, r.test_accuracy);
        }
    }
    Ok(())
}
