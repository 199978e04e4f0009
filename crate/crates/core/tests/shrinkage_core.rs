mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use panelshrink::constraints::{gamma_ball, mu_box, realize_lambda};
use panelshrink::linalg::{spectral_norm, sym_eigenvalues};
use panelshrink::model::{Center, HyperParams, LambdaKind, LambdaStructure, NormalMeansProblem, Unit};
use panelshrink::shrinkage::{ebmle_negloglik, estimates, loss, shrink, ure, WeightSpec};
use proptest::prelude::*;

#[test]
fn shrink_matches_explicit_inverse() {
    let mut r = rng(1);
    for _ in 0..100 {
        let lambda = random_pd(3, 0.0, &mut r);
        let sigma = random_pd(3, 0.1, &mut r);
        let (mu, y) = (random_vec(3, &mut r), random_vec(3, &mut r) * 3.0);
        let want = &mu + &lambda * inverse(&(&lambda + &sigma)) * (&y - &mu);
        assert!(max_abs(&shrink(&y, &sigma, &mu, &lambda).unwrap(), &want) < 1e-10);
    }
}

#[test]
fn loss_matches_double_loop() {
    let mut r = rng(2);
    let p = random_problem(25, 4, &mut r);
    let est: Vec<DVector<f64>> = p.units.iter().map(|u| &u.y * 0.7).collect();
    let w = random_pd(4, 0.2, &mut r);
    let mut want = 0.0;
    for (u, e) in p.units.iter().zip(&est) {
        let th = u.theta_true.as_ref().unwrap();
        for a in 0..4 {
            for b in 0..4 {
                want += (e[a] - th[a]) * w[(a, b)] * (e[b] - th[b]);
            }
        }
    }
    want /= 25.0;
    assert!((loss(&est, &p, &WeightSpec::Matrix(w)).unwrap() - want).abs() < 1e-12);

    let truth: Vec<DVector<f64>> = p.units.iter().map(|u| u.theta_true.clone().unwrap()).collect();
    assert_eq!(loss(&truth, &p, &WeightSpec::Identity).unwrap(), 0.0);
}

#[test]
fn negloglik_matches_dense_evaluation() {
    let mut r = rng(3);
    let p = random_problem(15, 3, &mut r);
    let lambda = random_pd(3, 0.0, &mut r);
    let mu = random_vec(3, &mut r);
    let h = HyperParams::new(Center::FixedVector(mu.clone()), lambda.clone());
    let want = p
        .units
        .iter()
        .map(|u| {
            let a = &lambda + &u.sigma;
            let e = &u.y - &mu;
            0.5 * (a.determinant().ln() + (e.transpose() * inverse(&a) * &e)[(0, 0)])
        })
        .sum::<f64>()
        / 15.0;
    assert!((ebmle_negloglik(&p, &h).unwrap() - want).abs() < 1e-10);
}

#[test]
fn negloglik_at_identity_noise_and_zero_lambda() {
    let mut r = rng(4);
    let units: Vec<Unit<f64>> = (0..10).map(|j| Unit::new(format!("{j}"), random_vec(3, &mut r), DMatrix::identity(3, 3))).collect();
    let want = units.iter().map(|u| 0.5 * u.y.norm_squared()).sum::<f64>() / 10.0;
    let p = NormalMeansProblem::new(3, 0, units);
    let h = HyperParams::new(Center::Zero, DMatrix::zeros(3, 3));
    assert!((ebmle_negloglik(&p, &h).unwrap() - want).abs() < 1e-12);
}

#[test]
fn ure_matches_dense_formula_with_weights() {
    let mut r = rng(5);
    let p = random_problem(20, 3, &mut r);
    let lambda = random_pd(3, 0.0, &mut r);
    let w = random_pd(3, 0.1, &mut r);
    let mu = random_vec(3, &mut r);
    let h = HyperParams::new(Center::FixedVector(mu.clone()), lambda.clone());
    let want = p
        .units
        .iter()
        .map(|u| {
            let ai = inverse(&(&lambda + &u.sigma));
            let e = &u.y - &mu;
            let q = &ai * &u.sigma * &w * &u.sigma * &ai;
            (&w * &u.sigma).trace() - 2.0 * (&ai * &u.sigma * &w * &u.sigma).trace() + (e.transpose() * q * &e)[(0, 0)]
        })
        .sum::<f64>()
        / 20.0;
    assert!((ure(&p, &h, &WeightSpec::Matrix(w)).unwrap() - want).abs() < 1e-10);
}

#[test]
fn estimates_have_observed_lengths_on_unbalanced_data() {
    let units = vec![
        Unit::with_mask("a", DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(2, 2), vec![true, false, true]),
        Unit::new("b", DVector::from_vec(vec![0.5, -1.0, 2.0]), DMatrix::identity(3, 3)),
        Unit::with_mask("c", DVector::from_vec(vec![3.0]), DMatrix::identity(1, 1), vec![false, true, false]),
    ];
    let p = NormalMeansProblem::new(3, 0, units);
    let h = HyperParams::new(Center::GrandMean, DMatrix::identity(3, 3));
    let est = estimates(&p, &h).unwrap();
    assert_eq!(est.iter().map(|e| e.len()).collect::<Vec<_>>(), vec![2, 3, 1]);
}

#[test]
fn box_quantile_examples() {
    let units: Vec<Unit<f64>> =
        (1..=100).map(|i| Unit::new(format!("{i}"), DVector::from_element(1, i as f64), DMatrix::identity(1, 1))).collect();
    let p = NormalMeansProblem::new(1, 0, units);
    assert_eq!(mu_box(&p, 0.05).unwrap().upper[0], 95.0);
    assert_eq!(mu_box(&p, 1.0 / 200.0).unwrap().upper[0], 100.0);
}

#[test]
fn grand_mean_inside_box_on_centered_data() {
    let mut r = rng(6);
    let p = random_problem(200, 4, &mut r);
    let bx = mu_box(&p, 0.05).unwrap();
    let gm = p.grand_mean();
    assert!(gm.iter().zip(bx.upper.iter()).all(|(g, u)| g.abs() < *u));
    assert!(bx.contains(&gm, 0.0));
}

#[test]
fn gamma_ball_identity_design_is_per_period_mean() {
    let mut r = rng(7);
    let mut p = random_problem(30, 3, &mut r);
    p.covariates = 3;
    for u in &mut p.units {
        u.z = Some(DMatrix::identity(3, 3));
    }
    let ball = gamma_ball(&p, 1e3).unwrap();
    assert!(max_abs(&ball.gamma_ols, &p.grand_mean()) < 1e-12);
    assert!((ball.radius - 1e3 * ball.gamma_ols.norm()).abs() < 1e-9);
}

#[test]
fn gamma_ball_matches_normal_equations() {
    let mut r = rng(8);
    let mut p = random_problem(40, 4, &mut r);
    p.covariates = 2;
    for u in &mut p.units {
        u.z = Some(DMatrix::from_fn(4, 2, |_, _| normal(&mut r)));
    }
    let z = DMatrix::from_fn(160, 2, |i, k| p.units[i / 4].z.as_ref().unwrap()[(i % 4, k)]);
    let y = DVector::from_fn(160, |i, _| p.units[i / 4].y[i % 4]);
    let want = (z.transpose() * &z).cholesky().unwrap().solve(&(z.transpose() * y));
    assert!(max_abs(&gamma_ball(&p, 1e3).unwrap().gamma_ols, &want) < 1e-10);

    for u in &mut p.units {
        u.y.fill(0.0);
    }
    assert_eq!(gamma_ball(&p, 1e3).unwrap().radius, 0.0);
}

/// `(S^{1/2}, S^{-1/2})` of a symmetric positive definite matrix.
fn sym_sqrt(s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = s.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let root = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|x| x.sqrt()));
    let half = v * DMatrix::from_diagonal(&root) * v.transpose();
    let inv = v * DMatrix::from_diagonal(&root.map(|x| 1.0 / x)) * v.transpose();
    (half, inv)
}

fn psd_strategy(t: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, t * t).prop_map(move |v| {
        let a = DMatrix::from_vec(t, t, v);
        &a * a.transpose()
    })
}

fn pd_strategy(t: usize) -> impl Strategy<Value = DMatrix<f64>> {
    psd_strategy(t).prop_map(move |m| m + DMatrix::identity(t, t) * 0.05)
}

proptest! {
    #[test]
    fn shrinkage_matrix_contracts(l in psd_strategy(3), s in pd_strategy(3)) {
        let op = &l * inverse(&(&l + &s));
        for ev in op.complex_eigenvalues().iter() {
            prop_assert!(ev.im.abs() < 1e-8);
            prop_assert!(ev.re > -1e-10 && ev.re < 1.0);
        }
        // Operator norm below one in the metric of the noise.
        let (half, inv_half) = sym_sqrt(&s);
        prop_assert!(spectral_norm(&(&inv_half * &op * &half)) < 1.0 + 1e-10);
    }

    #[test]
    fn commuting_shrinkage_has_singular_values_below_one(
        d in prop::collection::vec(0.0f64..5.0, 3),
        e in prop::collection::vec(0.05f64..5.0, 3),
        seed in 0u64..1000,
    ) {
        let q = random_pd(3, 0.1, &mut rng(seed)).symmetric_eigen().eigenvectors;
        let l = &q * DMatrix::from_diagonal(&DVector::from_vec(d)) * q.transpose();
        let s = &q * DMatrix::from_diagonal(&DVector::from_vec(e)) * q.transpose();
        prop_assert!(spectral_norm(&(&l * inverse(&(&l + &s)))) < 1.0 + 1e-10);
    }

    #[test]
    fn noisier_units_shrink_more(l in psd_strategy(3), s in pd_strategy(3), extra in psd_strategy(3)) {
        let spectrum = |m: &DMatrix<f64>| {
            let mut v: Vec<f64> = (&l * inverse(&(&l + m))).complex_eigenvalues().iter().map(|c| c.re).collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v
        };
        let quiet = spectrum(&s);
        let noisy = spectrum(&(&s + extra));
        for (n, q) in noisy.iter().zip(&quiet) {
            prop_assert!(*n <= q + 1e-9);
        }
    }

    #[test]
    fn realized_lambda_is_symmetric_psd(params in prop::collection::vec(-3.0f64..3.0, 10), kind in 0usize..4) {
        let kind = [LambdaKind::Full, LambdaKind::Diagonal, LambdaKind::ScaledIdentity, LambdaKind::RankOneConstant][kind];
        let s = LambdaStructure::new(kind, 4);
        let p = DVector::from_vec(params[..s.param_count()].to_vec());
        let m = realize_lambda(&s, &p);
        prop_assert_eq!(&m, &m.transpose());
        let ev = sym_eigenvalues(&m);
        let top = ev.iter().fold(0.0f64, |a, e| a.max(e.abs()));
        prop_assert!(ev[0] >= -1e-12 * top.max(1.0));
    }

    #[test]
    fn toeplitz_realization_is_symmetric(params in prop::collection::vec(-3.0f64..3.0, 4)) {
        let m = realize_lambda(&LambdaStructure::new(LambdaKind::Toeplitz, 4), &DVector::from_vec(params));
        prop_assert_eq!(&m, &m.transpose());
    }

    #[test]
    fn box_shrinks_as_tau_grows(seed in 0u64..1000, t1 in 0.01f64..0.5, dt in 0.0f64..0.4) {
        let mut r = rng(seed);
        let p = random_problem(37, 3, &mut r);
        let a = mu_box(&p, t1).unwrap();
        let b = mu_box(&p, t1 + dt).unwrap();
        prop_assert!(a.upper.iter().zip(b.upper.iter()).all(|(x, y)| x >= y));
    }

    #[test]
    fn shrinkage_identity_reapplies_exactly(seed in 0u64..1000) {
        let mut r = rng(seed);
        let p = random_problem(6, 3, &mut r);
        let lambda = random_pd(3, 0.0, &mut r);
        let mu = random_vec(3, &mut r);
        let est = estimates(&p, &HyperParams::new(Center::FixedVector(mu.clone()), lambda.clone())).unwrap();
        for (u, e) in p.units.iter().zip(&est) {
            prop_assert_eq!(&shrink(&u.y, &u.sigma, &mu, &lambda).unwrap(), e);
        }
    }
}
