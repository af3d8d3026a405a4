//! Central-difference check of a small conv -> batch-norm -> ReLU -> GAP -> affine
//! -> cross-entropy chain built directly on the tape.
//!
//! `cargo run --release --example gradient_check`

use broadnas::tensor::{BnMode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(x: &Tensor, w: &Tensor, fc: &Tensor, grads: bool) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.param(w.clone());
    let fv = tape.param(fc.clone());
    let gamma = tape.constant(Tensor::full([4], 1.0));
    let beta = tape.constant(Tensor::zeros([4]));
    let h = tape.conv2d(xv, wv, 2).unwrap();
    let (h, _) = tape.batch_norm(h, gamma, beta, None, BnMode::Train, 1e-5).unwrap();
    let h = tape.relu(h);
    let h = tape.global_avg_pool(h).unwrap();
    let logits = tape.affine(h, fv, None).unwrap();
    let l = tape.softmax_cross_entropy(logits, &[0, 2, 1]).unwrap();
    let value = tape.data(l)[0];
    if !grads {
        return (value, None);
    }
    tape.backward(l).unwrap();
    (value, Some((tape.grad(wv).unwrap().to_vec(), tape.grad(fv).unwrap().to_vec())))
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut randn = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0));
    let x = randn(&[3, 2, 7, 7]);
    let w = randn(&[4, 2, 3, 3]);
    let fc = randn(&[3, 4]);
    let (value, grads) = loss(&x, &w, &fc, true);
    let (gw, gf) = grads.unwrap();
    println!("loss {value:.6}");
    let h = 1e-5;
    for (name, analytic, which) in [("conv weight", gw, 0), ("classifier", gf, 1)] {
        let mut worst: f64 = 0.0;
        for (j, a) in analytic.iter().enumerate() {
            let bump = |d: f64| {
                let (mut w, mut f) = (w.clone(), fc.clone());
                if which == 0 {
                    w.data_mut()[j] += d;
                } else {
                    f.data_mut()[j] += d;
                }
                loss(&x, &w, &f, false).0
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
        println!("{name:12} {} entries, worst relative error {worst:.2e}", analytic.len());
    }
}
