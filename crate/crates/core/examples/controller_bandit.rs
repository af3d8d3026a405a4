//! Trains the controller on a synthetic bandit: reward 1 when the first operation
//! token of the convolution cell picks a target operation, 0 otherwise.
//!
//! cargo run --release --example controller_bandit -- [updates] [target-op]

use broadnas::cell::{OpKind, TokenSequence};
use broadnas::controller::{Controller, ControllerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn target_probability(c: &Controller, target: usize) -> f64 {
    // marginalize the first input token, which precedes the rewarded position
    let len = c.grammar().sequence_len();
    let mut total = 0.0;
    for first in 0..c.grammar().range(0) {
        let mut t = vec![0; len];
        t[0] = first;
        let d = c.distributions(&TokenSequence::new(t)).expect("legal tokens");
        total += d[0][first] * d[1][target];
    }
    total
}

fn main() {
    let mut args = std::env::args().skip(1);
    let updates: usize = args.next().map(|s| s.parse().expect("updates")).unwrap_or(2000);
    let target: OpKind = args.next().map(|s| s.parse().expect("op name")).unwrap_or(OpKind::SepConv5x5);
    let mut c = Controller::new(ControllerConfig::default(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    println!("initial P({target}) = {:.4}", target_probability(&c, target.code()));
    for step in 1..=updates {
        let e = c.sample(&mut rng).expect("sample");
        let reward = f64::from(u8::from(e.tokens.as_slice()[1] == target.code()));
        c.update(&[(e.tokens, reward)]).expect("update");
        if step % (updates / 10).max(1) == 0 {
            println!("update {step:>5}: P({target}) = {:.4}", target_probability(&c, target.code()));
        }
    }
}
