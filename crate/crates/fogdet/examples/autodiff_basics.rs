//! Exercises the reverse-mode tape directly: a small convolution network
//! in f64, its gradients, and a central-finite-difference cross-check.
//!
//! Usage: cargo run --example autodiff_basics

use fogdet::autograd::Tape;
use fogdet::nn::{Binding, Conv2d, ParamStore};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_of(conv: &Conv2d, store: &ParamStore<f64>, x: &ArrayD<f64>) -> f64 {
    let tape = Tape::<f64>::new();
    let bx = Binding::frozen(&tape, store);
    let h = conv.forward(&bx, tape.constant(x.clone()));
    let h = tape.relu(h);
    let loss = tape.mean_all(tape.mul(h, h));
    tape.scalar(loss)
}

fn main() -> fogdet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = ArrayD::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |_| rng.gen_range(-1.0..1.0));

    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, 0, "conv", 3, 4, 3, 1, true);

    let tape = Tape::<f64>::new();
    let bx = Binding::new(&tape, &store);
    let h = conv.forward(&bx, tape.constant(x.clone()));
    let h = tape.relu(h);
    let loss = tape.mean_all(tape.mul(h, h));
    println!("loss = {:.6}", tape.scalar(loss));

    let grads = tape.backward(loss);
    let bound = bx.bound();
    for (name, tx) in &bound {
        let g = grads.get(*tx).expect("parameter reached the loss");
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("d loss / d {name}: shape {:?}, norm {norm:.6}", g.shape());
    }

    let (name, tx) = bound
        .iter()
        .find(|(n, _)| n == "conv.weight")
        .expect("weight is bound");
    let analytic = grads.get(*tx).unwrap()[IxDyn(&[0, 0, 0, 0])];
    let mut probe = ParamStore::<f64>::new();
    for (n, v) in store.iter() {
        probe.insert(n.clone(), v.clone());
    }
    let w0 = probe.get(name).unwrap()[IxDyn(&[0, 0, 0, 0])];
    let eps = 1e-5;
    probe.get_mut(name).unwrap()[IxDyn(&[0, 0, 0, 0])] = w0 + eps;
    let up = loss_of(&conv, &probe, &x);
    probe.get_mut(name).unwrap()[IxDyn(&[0, 0, 0, 0])] = w0 - eps;
    let down = loss_of(&conv, &probe, &x);
    let fd = (up - down) / (2.0 * eps);
    println!("{name}[0,0,0,0]: analytic {analytic:.8} vs finite difference {fd:.8}");
    Ok(())
}
