//! Canonical-form operations against sampling and dense linear algebra.

mod common;

use nalgebra::{DMatrix, DVector};
use pgm_sam::gaussian::{GaussianFactor, VariableId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn marginal_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let keep = VariableId::feature(0, 2);
    let scope = [keep, VariableId::feature(1, 3)];
    for _ in 0..3 {
        let mean = common::random_vector(&mut rng, 5, 2.0);
        let cov = common::random_spd(&mut rng, 5, 0.2);
        let joint = GaussianFactor::from_moments(&scope, &mean, &cov).unwrap();
        let marginal = joint.marginalize(&[keep]).unwrap().to_moments().unwrap();
        let sampler = common::Sampler::new(&mean, &cov);
        let draws: Vec<DVector<f64>> = (0..1_000_000)
            .map(|_| sampler.draw(&mut rng).rows(0, 2).into_owned())
            .collect();
        let mc = common::sample_moments(&draws);
        let z = common::worst_z(&mc, &marginal.mean, &marginal.cov);
        assert!(z <= 3.0, "marginal is {z:.2} standard errors from sampling");
    }
}

fn blocks(dims: &[usize]) -> Vec<VariableId> {
    dims.iter().enumerate().map(|(i, &d)| VariableId::feature(i, d)).collect()
}

proptest! {
    #[test]
    fn marginal_is_covariance_block(dims in prop::collection::vec(1usize..4, 2..5), seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scope = blocks(&dims);
        let n: usize = dims.iter().sum();
        let mean = common::random_vector(&mut rng, n, 1.0);
        let cov = common::random_spd(&mut rng, n, 0.5);
        let f = GaussianFactor::from_moments(&scope, &mean, &cov).unwrap();
        let k = pick.index(scope.len());
        let start: usize = dims[..k].iter().sum();
        let m = f.marginalize(&[scope[k]]).unwrap().to_moments().unwrap();
        let want = cov.view((start, start), (dims[k], dims[k])).into_owned();
        prop_assert!((m.mean - mean.rows(start, dims[k])).amax() < 1e-8);
        prop_assert!((m.cov - want).amax() < 1e-8 * cov.amax());
    }

    #[test]
    fn product_then_quotient_is_identity(dims in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scope = blocks(&dims);
        let n: usize = dims.iter().sum();
        let a = GaussianFactor::from_moments(&scope, &common::random_vector(&mut rng, n, 1.0), &common::random_spd(&mut rng, n, 0.5)).unwrap();
        let b = GaussianFactor::from_moments(&scope, &common::random_vector(&mut rng, n, 1.0), &common::random_spd(&mut rng, n, 0.5)).unwrap();
        let back = a.multiply(&b).unwrap().divide(&b).unwrap();
        prop_assert!(back.max_param_delta(&a).unwrap() < 1e-8 * a.precision().amax().max(1.0));
    }
}

#[test]
fn conditioning_matches_schur_complement() {
    // p(y | x = v) for a joint over (x, y): mean μy + Σyx Σxx⁻¹ (v − μx).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = VariableId::feature(0, 2);
    let y = VariableId::feature(1, 2);
    let mean = common::random_vector(&mut rng, 4, 1.0);
    let cov = common::random_spd(&mut rng, 4, 0.5);
    let v = common::random_vector(&mut rng, 2, 1.0);
    let joint = GaussianFactor::from_moments(&[x, y], &mean, &cov).unwrap();
    let observed = joint.observe(&x, &v, 1e-7).unwrap();
    let post = observed.marginal_moments(&y).unwrap();
    let sxx = cov.view((0, 0), (2, 2)).into_owned();
    let syx = cov.view((2, 0), (2, 2)).into_owned();
    let syy = cov.view((2, 2), (2, 2)).into_owned();
    let gain = &syx * sxx.try_inverse().unwrap();
    let want_mean = mean.rows(2, 2) + &gain * (v - mean.rows(0, 2));
    let want_cov: DMatrix<f64> = syy - &gain * syx.transpose();
    assert!((post.mean - want_mean).amax() < 1e-5);
    assert!((post.cov - want_cov).amax() < 1e-5);
}
