mod common;

use common::*;
use nalgebra::DMatrix;
use panelshrink::panel::{
    aggregate_effects, cell_effects, fit_panel, residual_variance, to_normal_means, variance_decomposition, within_beta,
    PanelDataset, PanelRecord,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `Y = X'β + α_jt + noise·ε` with `n_jt` drawn from `sizes`; cells listed in
/// `skip` are left empty.
fn synth(
    units: usize,
    periods: usize,
    beta: &[f64],
    alpha: &DMatrix<f64>,
    noise: f64,
    sizes: std::ops::RangeInclusive<usize>,
    skip: &[(usize, usize)],
    r: &mut ChaCha8Rng,
) -> PanelDataset<f64> {
    let mut recs = Vec::new();
    for j in 0..units {
        for t in 0..periods {
            if skip.contains(&(j, t)) {
                continue;
            }
            for i in 0..r.random_range(sizes.clone()) {
                let x: Vec<f64> = beta.iter().map(|_| normal(r)).collect();
                let y = x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + alpha[(j, t)] + noise * normal(r);
                recs.push(PanelRecord { unit: format!("j{j}"), period: t + 1, individual: format!("{i}"), outcome: y, x });
            }
        }
    }
    PanelDataset::new(periods, beta.len(), recs).unwrap()
}

fn alpha_of(name: &str, period: usize, alpha: &DMatrix<f64>) -> f64 {
    alpha[(name[1..].parse::<usize>().unwrap(), period)]
}

#[test]
fn no_covariates_gives_cell_means() {
    let mut r = rng(1);
    let alpha = DMatrix::from_fn(4, 2, |_, _| normal(&mut r));
    let panel = synth(4, 2, &[], &alpha, 1.0, 2..=6, &[], &mut r);
    let beta = within_beta(&panel).unwrap();
    assert_eq!(beta.len(), 0);
    let cells = panel.cells();
    let effects = cell_effects(&panel, &beta).unwrap();
    for (c, e) in cells.iter().zip(&effects) {
        assert!((c.y_mean - e.alpha).abs() < 1e-15);
        assert_eq!(c.records.len(), e.n);
    }
}

#[test]
fn zero_noise_recovers_everything() {
    let mut r = rng(2);
    let beta = [0.4, -1.1, 2.0];
    let alpha = DMatrix::from_fn(5, 3, |_, _| normal(&mut r));
    let panel = synth(5, 3, &beta, &alpha, 0.0, 3..=6, &[], &mut r);
    let b = within_beta(&panel).unwrap();
    assert!(b.iter().zip(&beta).all(|(x, y)| (x - y).abs() < 1e-10));
    assert!(residual_variance(&panel, &b).unwrap().abs() < 1e-12);
    for e in cell_effects(&panel, &b).unwrap() {
        assert!((e.alpha - alpha_of(&e.unit, e.period, &alpha)).abs() < 1e-10);
    }
}

#[test]
fn residual_variance_is_consistent() {
    let mut r = rng(3);
    let alpha = DMatrix::from_fn(30, 3, |_, _| normal(&mut r));
    let panel = synth(30, 3, &[0.5, 1.0], &alpha, 1.5, 20..=40, &[], &mut r);
    let b = within_beta(&panel).unwrap();
    let s2 = residual_variance(&panel, &b).unwrap();
    assert!((s2 / 2.25 - 1.0).abs() < 0.05, "{s2}");
}

#[test]
fn large_cells_recover_effects() {
    let mut r = rng(4);
    let beta = [0.7];
    let alpha = DMatrix::from_fn(3, 2, |_, _| normal(&mut r));
    let panel = synth(3, 2, &beta, &alpha, 1.0, 10_000..=10_000, &[], &mut r);
    let fit = fit_panel(&panel).unwrap();
    assert!((fit.beta_hat[0] - 0.7).abs() < 0.05);
    assert!((fit.sigma2_hat - 1.0).abs() < 0.05);
    for e in &fit.alpha_hat {
        assert!((e.alpha - alpha_of(&e.unit, e.period, &alpha)).abs() < 0.05);
    }
}

#[test]
fn shifting_outcomes_shifts_effects() {
    let mut r = rng(5);
    let alpha = DMatrix::from_fn(4, 3, |_, _| normal(&mut r));
    let panel = synth(4, 3, &[1.0, -0.5], &alpha, 1.0, 2..=5, &[], &mut r);
    let mut shifted = panel.clone();
    for rec in &mut shifted.records {
        rec.outcome += 3.25;
    }
    let (a, b) = (fit_panel(&panel).unwrap(), fit_panel(&shifted).unwrap());
    assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-12);
    for (x, y) in a.alpha_hat.iter().zip(&b.alpha_hat) {
        assert!((y.alpha - x.alpha - 3.25).abs() < 1e-12);
    }
}

#[test]
fn normal_means_problem_from_balanced_panel() {
    let mut r = rng(6);
    let alpha = DMatrix::from_fn(6, 3, |_, _| normal(&mut r));
    let panel = synth(6, 3, &[0.3], &alpha, 1.0, 2..=7, &[], &mut r);
    let fit = fit_panel(&panel).unwrap();
    let p = to_normal_means(&fit, false).unwrap();
    assert!(p.is_balanced());
    assert_eq!(p.len(), 6);
    for e in &fit.alpha_hat {
        let u = p.units.iter().find(|u| u.id == e.unit).unwrap();
        assert_eq!(u.sigma[(e.period, e.period)], fit.sigma2_hat / e.n as f64);
        assert_eq!(u.y[e.period], e.alpha);
    }
    assert!(p.units.iter().all(|u| u.sigma.iter().enumerate().all(|(i, &v)| i % 4 == 0 || v == 0.0)));

    let d = to_normal_means(&fit, true).unwrap();
    for t in 0..3 {
        let mean = d.units.iter().map(|u| u.y[t]).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
    }
}

#[test]
fn missing_cells_become_masked_periods() {
    let mut r = rng(7);
    let alpha = DMatrix::from_fn(4, 3, |_, _| normal(&mut r));
    let panel = synth(4, 3, &[0.3], &alpha, 1.0, 2..=5, &[(1, 0), (3, 2)], &mut r);
    let p = to_normal_means(&fit_panel(&panel).unwrap(), false).unwrap();
    assert!(!p.is_balanced());
    assert_eq!(p.units[1].mask, vec![false, true, true]);
    assert_eq!(p.units[3].mask, vec![true, true, false]);
    assert_eq!(p.units[1].y.len(), 2);
    assert!(p.validate().is_empty());
}

#[test]
fn variance_decomposition_adds_up() {
    let mut r = rng(8);
    for seed in 0..5 {
        let alpha = DMatrix::from_fn(7, 4, |_, _| normal(&mut r) * (1.0 + seed as f64));
        let skip = [(0, 1), (5, 3)];
        let panel = synth(7, 4, &[0.2, 0.9], &alpha, 1.0, 1..=8, &skip, &mut r);
        let fit = fit_panel(&panel).unwrap();
        let d = variance_decomposition(&fit);
        assert!((d.within + d.between - d.total).abs() < 1e-10);
        assert!(d.within >= 0.0 && d.between >= 0.0);
        assert!((0.0..=1.0).contains(&d.within_share()));
    }
}

#[test]
fn aggregate_effect_is_count_weighted() {
    let mut r = rng(9);
    let alpha = DMatrix::from_fn(3, 2, |_, _| normal(&mut r));
    let panel = synth(3, 2, &[1.0], &alpha, 0.5, 1..=9, &[], &mut r);
    let fit = fit_panel(&panel).unwrap();
    for (id, a0) in aggregate_effects(&fit) {
        let cells: Vec<_> = fit.alpha_hat.iter().filter(|e| e.unit == id).collect();
        let n: usize = cells.iter().map(|e| e.n).sum();
        let want = cells.iter().map(|e| e.n as f64 * e.alpha).sum::<f64>() / n as f64;
        assert!((a0 - want).abs() < 1e-12);
    }
}

#[test]
fn zero_residual_variance_cannot_form_covariances() {
    let mut r = rng(10);
    let alpha = DMatrix::from_fn(3, 2, |j, t| (j + 2 * t) as f64);
    let panel = synth(3, 2, &[], &alpha, 0.0, 3..=4, &[], &mut r);
    assert!(to_normal_means(&fit_panel(&panel).unwrap(), false).is_err());
}
