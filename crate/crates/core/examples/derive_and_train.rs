//! Short one-shot search on synthetic data, ranks controller samples, and trains
//! the best one from scratch.
//!
//! `cargo run --release --example derive_and_train -- [search-epochs] [train-epochs]`

use broadnas::builder::{ArchConfig, Sharing, Variant};
use broadnas::data::{synthetic_dataset_with, AugmentSpec, Normalization, Split, SyntheticSpec};
use broadnas::search::{derive, desk_search_config, final_train, Search, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let search_epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(5);
    let train_epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(10);

    let spec = SyntheticSpec::new(10, 1000, 16, 3);
    let train = synthetic_dataset_with(&spec, Split::Train)?;
    let val = synthetic_dataset_with(&SyntheticSpec { n: 250, ..spec }, Split::Val)?;
    let test = synthetic_dataset_with(&SyntheticSpec { n: 250, ..spec }, Split::Test)?;
    let norm = Normalization::from_dataset(&train);

    let mut cfg = desk_search_config(Variant::Bnas, 10, 3);
    cfg.epochs = search_epochs;
    let mut search = Search::new(cfg.clone(), train.clone(), val.clone(), norm.clone())?;
    search.run(|_, r| {
        println!("search epoch {}  reward {:.3}", r.epoch, r.controller.mean_reward);
        Ok(())
    })?;

    let ranked = derive(&search.controller, &search.store, &cfg.arch, &val, &norm, 5, cfg.batch_size, 3)?;
    for (i, c) in ranked.iter().enumerate() {
        println!("candidate {i}: validation accuracy {:.3}", c.score);
    }
    let best = &ranked[0].genotype;
    println!("{best}");

    let tcfg = TrainConfig {
        arch: ArchConfig { v: 1, k: 1, sharing: Sharing::Standalone, ..cfg.arch },
        epochs: train_epochs,
        batch_size: 64,
        augment: AugmentSpec::standard().with_cutout(8),
        seed: 3,
        ..TrainConfig::default()
    };
    let (_, report) = final_train(best, &tcfg, &train, &test, &norm, |e| {
        println!("train epoch {:3}  lr {:.4}  loss {:.4}  acc {:.3}", e.epoch, e.lr, e.loss, e.accuracy);
    })?;
    println!("test accuracy {:.3} with {} parameters", report.test_accuracy, report.parameters);
    Ok(())
}
