#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use panelshrink::model::{NormalMeansProblem, Unit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn random_vec(t: usize, r: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(t, |_, _| normal(r))
}

pub fn random_pd(t: usize, ridge: f64, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(t, t, |_, _| normal(r));
    &a * a.transpose() / t as f64 + DMatrix::identity(t, t) * ridge
}

pub fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

/// Balanced problem with random covariances and `y = θ + noise`, truth attached.
pub fn random_problem(units: usize, t: usize, r: &mut ChaCha8Rng) -> NormalMeansProblem<f64> {
    let list = (0..units)
        .map(|j| {
            let sigma = random_pd(t, 0.1, r);
            let theta = random_vec(t, r);
            let y = &theta + sigma.clone().cholesky().unwrap().l() * random_vec(t, r);
            Unit::new(format!("u{j}"), y, sigma).truth(theta)
        })
        .collect();
    NormalMeansProblem::new(t, 0, list)
}

/// Homoskedastic problem: every unit shares `sigma`.
pub fn common_sigma_problem(units: usize, sigma: &DMatrix<f64>, spread: f64, r: &mut ChaCha8Rng) -> NormalMeansProblem<f64> {
    let t = sigma.nrows();
    let l = sigma.clone().cholesky().unwrap().l();
    let list = (0..units)
        .map(|j| {
            let theta = random_vec(t, r) * spread;
            let y = &theta + &l * random_vec(t, r);
            Unit::new(format!("u{j}"), y, sigma.clone()).truth(theta)
        })
        .collect();
    NormalMeansProblem::new(t, 0, list)
}

pub fn max_abs(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}
