mod common;

use common::{rng, softmax_logits, uniform};
use proptest::prelude::*;
use stformer_core::linalg::{
    iterative_pinv, iterative_pinv_trace, pinv_residual, spectral_norm, svd_pinv_oracle, PinvConfig,
};
use stformer_core::Tensor;

/// Diagonal logit boost of the well-conditioned row-stochastic family.
const BOOST: f64 = 6.0;

fn premise_gap(a: &Tensor) -> f64 {
    let oracle = svd_pinv_oracle(a).unwrap();
    let (z0, _) = a.pinv_init().unwrap();
    let lhs = a.matmul(&oracle).unwrap().sub(&a.matmul(&z0).unwrap()).unwrap();
    spectral_norm(&lhs).unwrap()
}

#[test]
fn agrees_with_oracle_on_row_stochastic_matrices() {
    for m in [4, 8, 16] {
        for seed in 0..100 {
            let a = softmax_logits(&mut rng(seed * 31 + m as u64), m, BOOST);
            let z = iterative_pinv(&a, &PinvConfig::default()).unwrap();
            let oracle = svd_pinv_oracle(&a).unwrap();
            assert!(z.max_abs_diff(&oracle) <= 1e-5, "m={m} seed={seed}");
            assert!(pinv_residual(&a, &z).unwrap() <= 1e-6, "m={m} seed={seed}");
            assert!(premise_gap(&a) < 1.0, "m={m} seed={seed}");
        }
    }
}

#[test]
fn eight_by_eight_example() {
    let a = softmax_logits(&mut rng(88), 8, BOOST);
    let z = iterative_pinv(&a, &PinvConfig::default()).unwrap();
    assert!(z.max_abs_diff(&svd_pinv_oracle(&a).unwrap()) <= 1e-5);
}

#[test]
fn six_iterations_are_not_enough_when_ill_conditioned() {
    // Unboosted logits leave the smallest singular value tiny; the iteration
    // still heads the right way but needs more steps.
    let a = softmax_logits(&mut rng(7), 16, 0.0);
    let z6 = iterative_pinv(&a, &PinvConfig::default()).unwrap();
    let z40 = iterative_pinv(&a, &PinvConfig::new(40).unwrap()).unwrap();
    assert!(pinv_residual(&a, &z6).unwrap() > 1e-6);
    assert!(pinv_residual(&a, &z40).unwrap() < pinv_residual(&a, &z6).unwrap());
    assert!(premise_gap(&a) < 1.0);
}

#[test]
fn oracle_satisfies_penrose_conditions() {
    for seed in 0..10 {
        let a = uniform(&mut rng(seed), &[6, 6], -1.0, 1.0);
        let p = svd_pinv_oracle(&a).unwrap();
        let apa = a.matmul(&p).unwrap().matmul(&a).unwrap();
        let pap = p.matmul(&a).unwrap().matmul(&p).unwrap();
        let ap = a.matmul(&p).unwrap();
        let pa = p.matmul(&a).unwrap();
        assert!(apa.max_abs_diff(&a) < 1e-8);
        assert!(pap.max_abs_diff(&p) < 1e-8);
        assert!(ap.max_abs_diff(&ap.transpose().unwrap()) < 1e-8);
        assert!(pa.max_abs_diff(&pa.transpose().unwrap()) < 1e-8);
    }
}

#[test]
fn oracle_handles_rank_deficiency() {
    let u = uniform(&mut rng(9), &[5, 2], -1.0, 1.0);
    let a = u.matmul_ex(&u, false, true).unwrap();
    let p = svd_pinv_oracle(&a).unwrap();
    let apa = a.matmul(&p).unwrap().matmul(&a).unwrap();
    assert!(apa.max_abs_diff(&a) < 1e-8);
}

fn residuals(a: &Tensor) -> Vec<f64> {
    iterative_pinv_trace(a, &PinvConfig::default())
        .unwrap()
        .iter()
        .map(|z| pinv_residual(a, z).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_never_increases(seed in any::<u64>()) {
        let a = softmax_logits(&mut rng(seed), 8, BOOST);
        let r = residuals(&a);
        for j in 1..r.len() {
            // Once converged the residual sits at roundoff and may jitter there.
            prop_assert!(r[j] <= r[j - 1] + 1e-12, "{r:?}");
        }
        prop_assert!(r[5] <= 1e-6);
    }

    #[test]
    fn premise_holds_for_plain_softmax(m in 2usize..17, seed in any::<u64>()) {
        let a = softmax_logits(&mut rng(seed), m, 0.0);
        prop_assert!(premise_gap(&a) < 1.0);
    }

    #[test]
    fn oracle_agreement_for_random_sizes(m in 2usize..17, seed in any::<u64>()) {
        let a = softmax_logits(&mut rng(seed), m, BOOST);
        let z = iterative_pinv(&a, &PinvConfig::default()).unwrap();
        prop_assert!(z.max_abs_diff(&svd_pinv_oracle(&a).unwrap()) <= 1e-5);
    }
}
