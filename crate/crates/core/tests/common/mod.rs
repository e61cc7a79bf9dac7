#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stformer_core::autodiff::Tape;
use stformer_core::{Tensor, TensorOps};

pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-4;

/// A function of several tensors, written once for both execution paths.
pub trait Case {
    fn eval<O: TensorOps>(&self, xs: &[O]) -> O;
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `±[0.1, 2)` so kinks at zero stay far from the probe step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.1..2.0);
        if rng.random::<bool>() { v } else { -v }
    })
}

pub fn softmax_logits(rng: &mut ChaCha8Rng, m: usize, diagonal: f64) -> Tensor {
    let normal = rand_distr::StandardNormal;
    Tensor::from_fn(&[m, m], |k| {
        let z: f64 = rand_distr::Distribution::sample(&normal, rng);
        z + if k / m == k % m { diagonal } else { 0.0 }
    })
    .softmax_rows()
    .unwrap()
}

/// Largest relative error between the taped gradient of `Σ r ⊙ case(xs)`
/// and central differences, over every entry of every input.
pub fn max_fd_error<C: Case>(case: &C, inputs: &[Tensor], seed: u64) -> f64 {
    let out_shape = case.eval(inputs).shape().to_vec();
    let mut r = rng(seed ^ 0xFD);
    let weights = uniform(&mut r, &out_shape, -1.0, 1.0);
    let loss = |xs: &[Tensor]| case.eval(xs).mul(&weights).unwrap().sum();

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = case.eval(&vars);
    let l = out.mul(&out.constant(weights.clone())).unwrap().sum();
    let grads = tape.backward(l).unwrap();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(var).unwrap();
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + FD_STEP;
            let up = loss(&probe);
            probe[k].data_mut()[i] = x - FD_STEP;
            let down = loss(&probe);
            probe[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR));
        }
    }
    worst
}
