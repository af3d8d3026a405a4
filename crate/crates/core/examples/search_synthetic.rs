//! Desk-scale search on the synthetic blob task, compared against random genotypes.
//!
//! `cargo run --release --example search_synthetic -- [epochs] [seed] [episodes-per-update]`

use broadnas::builder::Variant;
use broadnas::data::{synthetic_dataset_with, Normalization, Split, SyntheticSpec};
use broadnas::search::{desk_search_config, random_rewards, Search};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(20);
    let seed: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);
    let per_update: Option<usize> = args.next().map(|a| a.parse()).transpose()?;

    let spec = SyntheticSpec::new(10, 2000, 16, seed);
    let train = synthetic_dataset_with(&spec, Split::Train)?;
    let val = synthetic_dataset_with(&SyntheticSpec { n: 500, ..spec }, Split::Val)?;
    let norm = Normalization::from_dataset(&train);

    let mut cfg = desk_search_config(Variant::Bnas, 10, seed);
    cfg.epochs = epochs;
    if let Some(n) = per_update {
        cfg.episodes_per_update = n;
    }
    let mut search = Search::new(cfg, train, val.clone(), norm.clone())?;
    search.run(|_, r| {
        println!(
            "epoch {:2}  loss {:.4}  acc {:.3}  reward {:.3}  baseline {:.3}  entropy {:.3}  {:.0}s",
            r.epoch,
            r.child.loss,
            r.child.accuracy,
            r.controller.mean_reward,
            r.controller.baseline,
            r.controller.mean_entropy,
            r.wall_clock
        );
        Ok(())
    })?;
    let cfg = search.config();
    let random =
        random_rewards(cfg.controller.grammar, &search.store, &cfg.arch, &val, &norm, 100, cfg.batch_size, seed)?;
    let mean = random.iter().sum::<f64>() / random.len() as f64;
    let last = search.log().records.last().map(|r| r.controller.mean_reward).unwrap_or(0.0);
    println!("final mean reward {last:.4}  random mean {mean:.4}  gap {:+.4}", last - mean);
    if let Some((r, g)) = search.best() {
        println!("best reward {r:.3}\n{g}");
    }
    Ok(())
}
