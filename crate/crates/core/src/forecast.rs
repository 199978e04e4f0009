//! One-period-ahead forecasts of `θ_{j,T+1}` with `Λ` tuned by an unbiased
//! estimate of the prediction error of `θ_{jT}` from `y_{j,−T}`.

use crate::constraints::{lambda_ball, params_from_lambda, pullback, realize_lambda, structure_penalty, LambdaBall};
use crate::linalg::{cholesky, psd_project, spectral_norm_sym, symmetrize};
use crate::model::{Diagnostics, LambdaKind, LambdaStructure, NormalMeansProblem};
use crate::optimizer::{minimize_from, start_points, LambdaObjective, OptimizerConfig};
use crate::scalar::Real;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Which period is split off a `T x T` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// `(−T, T)`: the last period against the first `T−1`.
    Last,
    /// `(−1, 1)`: the first period against the trailing `T−1`.
    First,
}

/// A symmetric matrix cut into the `(T−1)` block, the cross vector and the
/// remaining scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockView<T: Real> {
    pub split: Split,
    pub rest: DMatrix<T>,
    pub cross: DVector<T>,
    pub corner: T,
}

impl<T: Real> BlockView<T> {
    pub fn new(m: &DMatrix<T>, split: Split) -> Self {
        let t = m.nrows();
        assert!(t >= 2 && m.ncols() == t, "block view needs a square matrix with T >= 2");
        let (off, k) = match split {
            Split::Last => (0, t - 1),
            Split::First => (1, 0),
        };
        Self {
            split,
            rest: m.view((off, off), (t - 1, t - 1)).into_owned(),
            cross: DVector::from_fn(t - 1, |i, _| m[(k, off + i)]),
            corner: m[(k, k)],
        }
    }

    pub fn recompose(&self) -> DMatrix<T> {
        let n = self.rest.nrows();
        let t = n + 1;
        let (off, k) = match self.split {
            Split::Last => (0, n),
            Split::First => (1, 0),
        };
        let mut m = DMatrix::zeros(t, t);
        m.view_mut((off, off), (n, n)).copy_from(&self.rest);
        for i in 0..n {
            m[(k, off + i)] = self.cross[i];
            m[(off + i, k)] = self.cross[i];
        }
        m[(k, k)] = self.corner;
        m
    }
}

/// `B = (Λ_{−T} + Σ_block)⁻¹ Λ_{T,−T}`.
pub fn b_coef<T: Real>(lambda: &DMatrix<T>, sigma_block: &DMatrix<T>) -> Result<DVector<T>> {
    let t = lambda.nrows();
    if t < 2 || lambda.ncols() != t || sigma_block.shape() != (t - 1, t - 1) {
        return Err(Error::Dimension("b_coef: need T x T lambda and (T-1) x (T-1) sigma block".into()));
    }
    let lv = BlockView::new(lambda, Split::Last);
    let chol = cholesky(&(&lv.rest + sigma_block)).ok_or_else(|| Error::SolveFailure { unit: "<block>".into() })?;
    Ok(chol.solve(&lv.cross))
}

fn check_forecastable<T: Real>(problem: &NormalMeansProblem<T>) -> Result<()> {
    problem.ensure_valid()?;
    if !problem.is_balanced() {
        return Err(Error::Precondition("forecasting requires a balanced panel".into()));
    }
    if problem.periods < 2 {
        return Err(Error::Precondition("forecasting requires T >= 2".into()));
    }
    if problem.is_empty() {
        return Err(Error::InvalidArgument("problem has no units".into()));
    }
    Ok(())
}

/// Per-unit pieces of the prediction-error estimate.
struct UpeUnit<T: Real> {
    y_head: DVector<T>,
    y_last: T,
    sigma_head: DMatrix<T>,
    sigma_cross: DVector<T>,
    sigma_last: T,
}

fn upe_units<T: Real>(problem: &NormalMeansProblem<T>) -> Vec<UpeUnit<T>> {
    let n = problem.periods - 1;
    problem
        .units
        .iter()
        .map(|u| {
            let sv = BlockView::new(&u.sigma, Split::Last);
            UpeUnit {
                y_head: u.y.rows(0, n).into_owned(),
                y_last: u.y[n],
                sigma_head: sv.rest,
                sigma_cross: sv.cross,
                sigma_last: sv.corner,
            }
        })
        .collect()
}

/// Value and gradient with respect to the full symmetric `Λ`.
fn upe_eval<T: Real>(units: &[UpeUnit<T>], lambda: &DMatrix<T>, want_grad: bool) -> Option<(T, Option<DMatrix<T>>)> {
    let t = lambda.nrows();
    let n = t - 1;
    let lv = BlockView::new(lambda, Split::Last);
    let mut total = T::zero();
    let mut g = if want_grad { Some(DMatrix::zeros(t, t)) } else { None };
    let two = T::of(2.0);
    for u in units {
        let chol = cholesky(&(&lv.rest + &u.sigma_head))?;
        let b = chol.solve(&lv.cross);
        let resid = b.dot(&u.y_head) - u.y_last;
        total += resid * resid - u.sigma_last + two * b.dot(&u.sigma_cross);
        if let Some(g) = g.as_mut() {
            let gb = &u.y_head * (two * resid) + &u.sigma_cross * two;
            let q = chol.solve(&gb);
            let qb = &q * b.transpose();
            let mut head = g.view_mut((0, 0), (n, n));
            head -= (&qb + qb.transpose()) * T::of(0.5);
            for i in 0..n {
                g[(n, i)] += q[i] * T::of(0.5);
                g[(i, n)] += q[i] * T::of(0.5);
            }
        }
    }
    let jn = T::of_usize(units.len());
    Some((total / jn, g.map(|g| g / jn)))
}

/// `(1/J) Σ_j ((B_j'y_{j,−T} − y_{jT})² − Σ_{jT} + 2 B_j'Σ_{j,T,−T})` with
/// `B_j = B(Λ, Σ_{j,−T})`.
pub fn upe<T: Real>(problem: &NormalMeansProblem<T>, lambda: &DMatrix<T>) -> Result<T> {
    check_forecastable(problem)?;
    let t = problem.periods;
    if lambda.shape() != (t, t) {
        return Err(Error::Dimension(format!("lambda must be {t}x{t}")));
    }
    upe_eval(&upe_units(problem), lambda, false)
        .map(|(v, _)| v)
        .ok_or_else(|| Error::SolveFailure { unit: "<upe>".into() })
}

/// Parameters of the forecasting `Λ`. For [`LambdaKind::Full`] this is a
/// Cholesky factor without its last diagonal entry, which the criterion
/// cannot identify; `λ_T` is then reported as `‖L_{T,−T}‖²`.
fn realize_forecast<T: Real>(structure: &LambdaStructure, params: &DVector<T>) -> DMatrix<T> {
    match structure.kind {
        LambdaKind::Full => {
            let full = params.clone().insert_row(params.len(), T::zero());
            realize_lambda(structure, &full)
        }
        _ => realize_lambda(structure, params),
    }
}

fn forecast_params_from<T: Real>(structure: &LambdaStructure, lambda: &DMatrix<T>) -> DVector<T> {
    let p = params_from_lambda(structure, lambda);
    match structure.kind {
        LambdaKind::Full => p.rows(0, p.len() - 1).into_owned(),
        _ => p,
    }
}

struct UpeObjective<T: Real> {
    units: Vec<UpeUnit<T>>,
    structure: LambdaStructure,
    bound: T,
    barrier_weight: T,
}

impl<T: Real> UpeObjective<T> {
    /// Logarithmic barrier, zero below `0.95 · bound` and infinite at the bound.
    fn barrier(&self, lambda: &DMatrix<T>, want_grad: bool) -> (T, Option<DMatrix<T>>) {
        let threshold = self.bound * T::of(0.95);
        let eig = nalgebra::SymmetricEigen::new(symmetrize(lambda));
        let mut top = 0;
        for i in 1..eig.eigenvalues.len() {
            if eig.eigenvalues[i].abs() > eig.eigenvalues[top].abs() {
                top = i;
            }
        }
        let s1 = eig.eigenvalues[top].abs();
        if s1 <= threshold {
            return (T::zero(), None);
        }
        if s1 >= self.bound {
            return (T::infinity(), None);
        }
        let slack = self.bound - s1;
        let value = -self.barrier_weight * (slack / (self.bound - threshold)).ln();
        let grad = want_grad.then(|| {
            let v = eig.eigenvectors.column(top).into_owned();
            let sign = eig.eigenvalues[top].signum();
            &v * v.transpose() * (self.barrier_weight / slack * sign)
        });
        (value, grad)
    }

    fn full_pullback(&self, params: &DVector<T>, g: &DMatrix<T>) -> DVector<T> {
        match self.structure.kind {
            LambdaKind::Full => {
                let full = params.clone().insert_row(params.len(), T::zero());
                let out = pullback(&self.structure, &full, g);
                out.rows(0, params.len()).into_owned()
            }
            _ => pullback(&self.structure, params, g),
        }
    }
}

impl<T: Real> LambdaObjective<T> for UpeObjective<T> {
    fn value(&self, params: &DVector<T>) -> T {
        let lambda = realize_forecast(&self.structure, params);
        let (b, _) = self.barrier(&lambda, false);
        if !b.finite() {
            return T::infinity();
        }
        match upe_eval(&self.units, &lambda, false) {
            Some((v, _)) => v + b + structure_penalty(&self.structure, &lambda),
            None => T::infinity(),
        }
    }

    fn value_and_gradient(&self, params: &DVector<T>) -> Option<(T, DVector<T>)> {
        let lambda = realize_forecast(&self.structure, params);
        let (b, bg) = self.barrier(&lambda, true);
        let bad = || Some((T::infinity(), DVector::zeros(params.len())));
        if !b.finite() {
            return bad();
        }
        let (v, g) = match upe_eval(&self.units, &lambda, true) {
            Some((v, Some(g))) => (v, g),
            _ => return bad(),
        };
        let mut g = g;
        if let Some(bg) = bg {
            g += bg;
        }
        if let Some(pg) = crate::constraints::structure_penalty_grad(&self.structure, &lambda) {
            g += pg;
        }
        Some((v + b + structure_penalty(&self.structure, &lambda), self.full_pullback(params, &g)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpeFit<T: Real> {
    /// `Λ` with `λ_T` set to its smallest PSD-compatible value for the
    /// full structure; only `Λ_{−T}` and `Λ_{T,−T}` are identified.
    pub lambda: DMatrix<T>,
    pub lambda_minus_t: DMatrix<T>,
    pub lambda_cross: DVector<T>,
    pub objective: T,
    pub ball: LambdaBall<T>,
    pub diagnostics: Diagnostics,
}

/// `Λ` minimizing the prediction-error estimate over the operator-norm ball
/// `σ₁(Λ) ≤ K σ₁((1/J) Σ y_j y_j')`.
pub fn fit_upe<T: Real>(
    problem: &NormalMeansProblem<T>,
    structure: LambdaStructure,
    k: T,
    config: &OptimizerConfig,
) -> Result<UpeFit<T>> {
    check_forecastable(problem)?;
    if structure.periods != problem.periods {
        return Err(Error::Dimension("structure and problem disagree on T".into()));
    }
    let ball = lambda_ball(problem, k)?;
    let units = upe_units(problem);
    let t = problem.periods;
    let mut moment = DMatrix::<T>::zeros(t, t);
    let mut sig = DMatrix::<T>::zeros(t, t);
    for u in &problem.units {
        moment += &u.y * u.y.transpose();
        sig += &u.sigma;
    }
    let jn = T::of_usize(problem.len());
    let mean_sig = sig / jn;
    let ridge = mean_sig.trace() / T::of_usize(t) * T::of(0.01);
    let mut init = psd_project(&(moment / jn - &mean_sig)) + DMatrix::identity(t, t) * ridge;
    // Keep the starting points strictly inside the barrier region.
    let s1 = spectral_norm_sym(&init);
    if s1 * T::of(10.0) > ball.bound * T::of(0.5) && s1 > T::zero() {
        init *= ball.bound * T::of(0.05) / s1;
    }
    let scale = units.iter().fold(T::zero(), |s, u| s + u.y_last * u.y_last) / jn;
    let objective = UpeObjective {
        units,
        structure,
        bound: ball.bound,
        barrier_weight: scale.max(T::epsilon()) * T::of(1e-3),
    };
    let starts: Vec<DVector<T>> = start_points(&structure, &init, config)
        .into_iter()
        .map(|p| forecast_params_from(&structure, &realize_lambda(&structure, &p)))
        .collect();
    let best = minimize_from(&objective, &starts, config)?;
    let mut params = best.params.clone();
    if structure.kind == LambdaKind::Toeplitz {
        let (lmin, _) = crate::linalg::min_eigenpair(&realize_lambda(&structure, &params));
        if lmin < T::zero() {
            params[0] -= lmin;
        }
    }
    let lambda = realize_forecast(&structure, &params);
    let value = upe_eval(&objective.units, &lambda, false)
        .map(|(v, _)| v)
        .ok_or_else(|| Error::Optimizer("Λ_{−T} + Σ_{j,−T} is singular at the optimum".into()))?;
    let view = BlockView::new(&lambda, Split::Last);
    Ok(UpeFit {
        lambda_minus_t: view.rest,
        lambda_cross: view.cross,
        lambda,
        objective: value,
        ball,
        diagnostics: Diagnostics {
            iterations: best.iterations,
            restarts: best.restarts,
            converged: best.converged,
            gradient_norm: best.gradient_norm.as_f64(),
            active_bounds: Vec::new(),
            singular_center: false,
            evaluations: best.evaluations,
        },
    })
}

/// Forecasts `B(Λ̂, Σ_{j,−1})' y_{j,−1}` of `θ_{j,T+1}`, using each unit's
/// trailing `T−1` observations and the matching block of `Σ_j`.
///
/// Logs a warning when the average leading and trailing blocks of `Σ_j`
/// differ by more than 20% in Frobenius norm, since the tuning then relies on
/// a doubtful stationarity assumption.
pub fn predict_next<T: Real>(problem: &NormalMeansProblem<T>, lambda: &DMatrix<T>) -> Result<Vec<T>> {
    check_forecastable(problem)?;
    let t = problem.periods;
    if lambda.shape() != (t, t) {
        return Err(Error::Dimension(format!("lambda must be {t}x{t}")));
    }
    let n = t - 1;
    let mut head = DMatrix::<T>::zeros(n, n);
    let mut tail = DMatrix::<T>::zeros(n, n);
    let mut out = Vec::with_capacity(problem.len());
    for u in &problem.units {
        let trailing = BlockView::new(&u.sigma, Split::First).rest;
        head += BlockView::new(&u.sigma, Split::Last).rest;
        tail += &trailing;
        let b = b_coef(lambda, &trailing).map_err(|_| Error::SolveFailure { unit: u.id.clone() })?;
        out.push(b.dot(&u.y.rows(1, n)));
    }
    let diff = (&head - &tail).norm();
    if diff > T::of(0.2) * head.norm() {
        log::warn!(
            "average sigma blocks for periods 1..T-1 and 2..T differ by {:.1}%; forecasts assume stationarity",
            (diff / head.norm()).as_f64() * 100.0
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Unit;
    use crate::optimizer::fd_gradient;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn block_views_round_trip() {
        let m = DMatrix::<f64>::from_fn(4, 4, |a, b| (a * 4 + b) as f64 + (b * 4 + a) as f64);
        for s in [Split::Last, Split::First] {
            assert_eq!(BlockView::new(&m, s).recompose(), m);
        }
    }

    #[test]
    fn scalar_blocks_hand_check() {
        let lambda = dmatrix![2.0, 0.7; 0.7, 1.5];
        let u = Unit::new("a", dvector![0.4f64, 1.3], dmatrix![0.5, 0.0; 0.0, 0.6]);
        let p = NormalMeansProblem::new(2, 0, vec![u]);
        let f = predict_next(&p, &lambda).unwrap();
        assert!((f[0] - 0.7 / (2.0 + 0.6) * 1.3).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_fd() {
        let units = (0..6)
            .map(|j| {
                let y = DVector::from_fn(3, |t, _| ((j * 3 + t) as f64 * 0.77).sin());
                let s = DMatrix::from_fn(3, 3, |a, b| if a == b { 0.5 + 0.1 * j as f64 } else { 0.05 });
                Unit::new(format!("{j}"), y, s)
            })
            .collect();
        let p = NormalMeansProblem::new(3, 0, units);
        let s = LambdaStructure::new(LambdaKind::Full, 3);
        let obj = UpeObjective { units: upe_units(&p), structure: s, bound: 1e3, barrier_weight: 1e-3 };
        let x = dvector![0.9, 0.2, 0.8, 0.3, -0.1];
        let (_, g) = obj.value_and_gradient(&x).unwrap();
        let fd = fd_gradient(&obj, &x, 1e-6);
        assert!((&g - &fd).amax() < 1e-6, "{g} {fd}");
    }
}
