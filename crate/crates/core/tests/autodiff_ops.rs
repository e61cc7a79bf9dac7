mod common;

use common::{away_from_zero, max_fd_error, rng, softmax_logits, uniform, Case};
use proptest::prelude::*;
use stformer_core::autodiff::Tape;
use stformer_core::linalg::{iterative_pinv, PinvConfig};
use stformer_core::{Tensor, TensorOps};

const TOL: f64 = 1e-4;

macro_rules! case {
    ($name:ident, |$xs:ident| $body:expr) => {
        struct $name;
        impl Case for $name {
            fn eval<O: TensorOps>(&self, $xs: &[O]) -> O {
                $body
            }
        }
    };
}

case!(MatMul, |x| x[0].matmul(&x[1]).unwrap());
case!(MatMulT, |x| x[0].matmul_t(&x[1]).unwrap());
case!(Transpose, |x| x[0].transpose().unwrap());
case!(SwapLeading, |x| x[0].swap_leading().unwrap());
case!(Reshape, |x| x[0].reshape(&[3, 4]).unwrap());
case!(Add, |x| x[0].add(&x[1]).unwrap());
case!(Sub, |x| x[0].sub(&x[1]).unwrap());
case!(Mul, |x| x[0].mul(&x[1]).unwrap());
case!(Scale, |x| x[0].scale(-2.5));
case!(RowBias, |x| x[0].add_row_bias(&x[1]).unwrap());
case!(Softmax, |x| x[0].softmax_rows().unwrap());
case!(LayerNorm, |x| x[0].layer_norm(&x[1], &x[2]).unwrap());
case!(Relu, |x| x[0].relu());
case!(Gelu, |x| x[0].gelu());
case!(Abs, |x| x[0].abs());
case!(Sum, |x| x[0].sum());
case!(Mean, |x| x[0].mean());
case!(Concat, |x| O::concat_last(&[x[0].clone(), x[1].clone()]).unwrap());
case!(SliceLast, |x| x[0].slice_last(1, 3).unwrap());
case!(SliceRows, |x| x[0].slice_rows(1, 3).unwrap());
case!(PadRows, |x| x[0].pad_rows(6).unwrap());
case!(Embedding, |x| x[0].embedding(&[2, 0, 2, 1]).unwrap());
case!(SegmentMeans, |x| x[0].segment_means(2).unwrap());
case!(PinvInit, |x| x[0].pinv_init().unwrap());
case!(FromIdentity, |x| x[0].sub_from_identity(7.0).unwrap());
case!(Pinv, |x| iterative_pinv(&x[0], &PinvConfig::default()).unwrap());
case!(SharedConsumer, |x| x[0].mul(&x[0]).unwrap().add(&x[0].relu()).unwrap());

fn assert_fd<C: Case>(name: &str, case: &C, inputs: &[Tensor], tol: f64) {
    let err = max_fd_error(case, inputs, 17);
    assert!(err <= tol, "{name}: relative error {err:e} exceeds {tol:e}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut r = rng(1);
    let mut u = |s: &[usize]| uniform(&mut r, s, -2.0, 2.0);
    assert_fd("matmul", &MatMul, &[u(&[4, 3]), u(&[3, 2])], TOL);
    assert_fd("matmul_t", &MatMulT, &[u(&[4, 3]), u(&[5, 3])], TOL);
    assert_fd("transpose", &Transpose, &[u(&[3, 5])], TOL);
    assert_fd("swap_leading", &SwapLeading, &[u(&[2, 3, 4])], TOL);
    assert_fd("reshape", &Reshape, &[u(&[2, 6])], TOL);
    assert_fd("add", &Add, &[u(&[3, 3]), u(&[3, 3])], TOL);
    assert_fd("sub", &Sub, &[u(&[3, 3]), u(&[3, 3])], TOL);
    assert_fd("mul", &Mul, &[u(&[3, 3]), u(&[3, 3])], TOL);
    assert_fd("scale", &Scale, &[u(&[2, 4])], TOL);
    assert_fd("add_row_bias", &RowBias, &[u(&[4, 3]), u(&[3])], TOL);
    assert_fd("softmax_rows", &Softmax, &[u(&[5, 5])], TOL);
    assert_fd("layer_norm", &LayerNorm, &[u(&[3, 8]), u(&[8]), u(&[8])], TOL);
    assert_fd("gelu", &Gelu, &[u(&[4, 4])], TOL);
    assert_fd("sum", &Sum, &[u(&[3, 4])], TOL);
    assert_fd("mean", &Mean, &[u(&[3, 4])], TOL);
    assert_fd("concat_last", &Concat, &[u(&[3, 2]), u(&[3, 4])], TOL);
    assert_fd("slice_last", &SliceLast, &[u(&[3, 5])], TOL);
    assert_fd("slice_rows", &SliceRows, &[u(&[4, 3])], TOL);
    assert_fd("pad_rows", &PadRows, &[u(&[4, 3])], TOL);
    assert_fd("embedding", &Embedding, &[u(&[3, 4])], TOL);
    assert_fd("segment_means", &SegmentMeans, &[u(&[6, 3])], TOL);
    assert_fd("sub_from_identity", &FromIdentity, &[u(&[4, 4])], TOL);
    let mut r = rng(2);
    assert_fd("relu", &Relu, &[away_from_zero(&mut r, &[4, 4])], TOL);
    assert_fd("abs", &Abs, &[away_from_zero(&mut r, &[4, 4])], TOL);
    assert_fd("shared consumer", &SharedConsumer, &[away_from_zero(&mut r, &[3, 3])], TOL);
    // Distinct magnitudes keep the column/row maxima of the norms unique.
    let a = Tensor::from_rows(&[vec![0.9, -0.2, 0.3], vec![0.1, 1.7, -0.4], vec![-0.5, 0.6, 2.9]]).unwrap();
    assert_fd("pinv_init", &PinvInit, &[a], TOL);
}

#[test]
fn pseudoinverse_is_differentiable() {
    let a = softmax_logits(&mut rng(3), 4, 3.0);
    assert_fd("iterative_pinv", &Pinv, &[a], 1e-3);
}

#[test]
fn matmul_sum_gradient_is_column_sums() {
    let mut r = rng(4);
    let a = uniform(&mut r, &[4, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let tape = Tape::new();
    let (va, vb) = (tape.param(a), tape.param(b.clone()));
    let g = tape.backward(va.matmul(&vb).unwrap().sum()).unwrap();
    let ga = g.get(&va).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            assert!((ga.at(i, j) - (b.at(j, 0) + b.at(j, 1))).abs() < 1e-15);
        }
    }
}

#[test]
fn two_consumers_sum_their_gradients() {
    let x = uniform(&mut rng(5), &[2, 3], -1.0, 1.0);
    let w = uniform(&mut rng(6), &[3, 3], -1.0, 1.0);
    let grad_of = |use_a: bool, use_b: bool| {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let cw = tape.constant(w.clone());
        let mut terms = Vec::new();
        if use_a {
            terms.push(v.matmul(&cw).unwrap().sum());
        }
        if use_b {
            terms.push(v.mul(&v).unwrap().sum());
        }
        let loss = terms.iter().skip(1).fold(terms[0], |acc, t| acc.add(t).unwrap());
        tape.backward(loss).unwrap().get(&v).unwrap().clone()
    };
    let both = grad_of(true, true);
    let sum = grad_of(true, false).add(&grad_of(false, true)).unwrap();
    assert!(both.max_abs_diff(&sum) < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let x = uniform(&mut rng(seed), &[rows, cols], -20.0, 20.0);
        let s = x.softmax_rows().unwrap();
        for i in 0..rows {
            let total: f64 = s.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(i).iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn reshape_transpose_round_trip(a in 1usize..6, b in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
        let x = uniform(&mut rng(seed), &[a, b * c], -5.0, 5.0);
        prop_assert_eq!(x.transpose().unwrap().transpose().unwrap(), x.clone());
        prop_assert_eq!(x.reshape(&[a, b, c]).unwrap().reshape(&[a, b * c]).unwrap(), x.clone());
        let y = x.reshape(&[a, b, c]).unwrap();
        prop_assert_eq!(y.swap_leading().unwrap().swap_leading().unwrap(), y);
    }

    #[test]
    fn matmul_gradients_hold_for_random_shapes(n in 1usize..5, k in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[n, k], -2.0, 2.0);
        let b = uniform(&mut r, &[k, m], -2.0, 2.0);
        prop_assert!(max_fd_error(&MatMul, &[a, b], seed) <= TOL);
    }

    #[test]
    fn softmax_gradients_hold_for_random_shapes(n in 1usize..5, m in 1usize..6, seed in any::<u64>()) {
        let x = uniform(&mut rng(seed), &[n, m], -3.0, 3.0);
        prop_assert!(max_fd_error(&Softmax, &[x], seed) <= TOL);
    }

    #[test]
    fn layer_norm_gradients_hold_for_random_shapes(n in 1usize..4, m in 2usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[n, m], -2.0, 2.0);
        let g = uniform(&mut r, &[m], -2.0, 2.0);
        let b = uniform(&mut r, &[m], -2.0, 2.0);
        prop_assert!(max_fd_error(&LayerNorm, &[x, g, b], seed) <= TOL);
    }
}
