//! Loads CIFAR-10 binaries from `$BROADNAS_DATA` (or a directory argument) and
//! prints split sizes, class balance and per-channel statistics. Without either,
//! writes a small fixture in the same format to a temporary directory and reads it
//! back.
//!
//! `cargo run --release --example cifar_loader -- [dir]`

use std::path::PathBuf;

use broadnas::cli::DATA_ENV;
use broadnas::data::{export_cifar10_binary, load_cifar10_binary, Dataset, Normalization, Split, CIFAR_SIDE};

fn describe(name: &str, ds: &Dataset) {
    let mut counts = vec![0usize; ds.classes];
    for &l in &ds.labels {
        counts[l as usize] += 1;
    }
    let n = Normalization::from_dataset(ds);
    println!("{name}: {} images, class counts {counts:?}", ds.len());
    println!("  mean {:.4?}  std {:.4?}", n.mean, n.std);
}

fn fixture(dir: &std::path::Path) -> Result<(), Box<dyn std::error::Error>> {
    let per = 3 * CIFAR_SIDE * CIFAR_SIDE;
    let make = |n: usize, split| {
        let images = (0..n * per).map(|i| (i * 7 % 251) as u8).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new(images, labels, [3, CIFAR_SIDE, CIFAR_SIDE], 10, split)
    };
    export_cifar10_binary(dir, &make(50, Split::Train)?, &make(20, Split::Test)?)?;
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let given = std::env::args().nth(1).map(PathBuf::from).or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from));
    let tmp;
    let dir = match given {
        Some(d) => d,
        None => {
            tmp = tempfile::tempdir()?;
            fixture(tmp.path())?;
            println!("no data directory given; using a generated fixture");
            tmp.path().to_path_buf()
        }
    };
    let (train, test) = load_cifar10_binary(&dir)?;
    let (train, val) = train.split_last(train.len() / 10)?;
    describe("train", &train);
    describe("val", &val);
    describe("test", &test);
    Ok(())
}
