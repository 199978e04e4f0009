//! Closed-form quantities of the linear shrinkage class
//! `θ̂_j(μ, Λ) = μ + Λ(Λ + Σ_j)⁻¹(y_j − μ)`: the estimator itself, its
//! compound loss, the unbiased risk estimate (balanced, covariate, weighted and
//! unbalanced forms) and the marginal log-likelihood of the Gaussian prior.
//!
//! Every `(Λ + Σ)⁻¹x` is a Cholesky solve; explicit inverses only appear in
//! test oracles.

use crate::linalg::{cholesky, sub_matrix, sub_vector, trace_product, Chol};
use crate::model::{resolve_centers, HyperParams, NormalMeansProblem};
use crate::scalar::Real;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Weighting of the squared error loss.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec<T: Real> {
    Identity,
    /// A fixed PSD `T x T` weight `W`.
    Matrix(DMatrix<T>),
    /// `W = Q'Q` for a nonnegative `R x T` matrix `Q`. On unbalanced units the
    /// observed columns are rescaled so their entries keep the total of `Q`.
    LinearCombination(DMatrix<T>),
}

/// How per-unit losses are scaled before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RiskScaling {
    /// `1/o_j` on unbalanced problems with identity or matrix weights, 1 otherwise.
    #[default]
    Auto,
    /// Always `1/o_j`, the per-observation loss of unbalanced panels.
    PerObservation,
    Unscaled,
}

/// Per-unit data that does not depend on the hyperparameters.
#[derive(Debug, Clone)]
pub(crate) struct PreparedUnit<T: Real> {
    pub idx: Vec<usize>,
    pub complete: bool,
    pub y: DVector<T>,
    pub sigma: DMatrix<T>,
    pub w: DMatrix<T>,
    /// `W Σ`
    pub ws: DMatrix<T>,
    /// `tr(W Σ)`
    pub tr_ws: T,
    pub scale: T,
}

#[derive(Debug, Clone)]
pub(crate) struct Prepared<T: Real> {
    pub units: Vec<PreparedUnit<T>>,
    pub ids: Vec<String>,
    pub periods: usize,
}

impl<T: Real> Prepared<T> {
    pub fn new(problem: &NormalMeansProblem<T>, weight: &WeightSpec<T>, scaling: RiskScaling) -> Result<Self> {
        let balanced = problem.is_balanced();
        let t = problem.periods;
        if let WeightSpec::Matrix(w) = weight {
            if w.nrows() != t || w.ncols() != t {
                return Err(Error::Dimension(format!("weight matrix must be {t}x{t}")));
            }
        }
        if let WeightSpec::LinearCombination(q) = weight {
            if q.ncols() != t {
                return Err(Error::Dimension(format!("Q must have T = {t} columns")));
            }
            if q.iter().any(|&v| v < T::zero()) {
                return Err(Error::InvalidArgument("Q must have nonnegative entries".into()));
            }
        }
        let mut units = Vec::with_capacity(problem.len());
        for u in &problem.units {
            let idx = u.observed();
            let o = idx.len();
            let w = match weight {
                WeightSpec::Identity => DMatrix::identity(o, o),
                WeightSpec::Matrix(w) => sub_matrix(w, &idx),
                WeightSpec::LinearCombination(q) => {
                    let qo = DMatrix::from_fn(q.nrows(), o, |r, a| q[(r, idx[a])]);
                    let kept = qo.sum();
                    if !(kept > T::zero()) {
                        return Err(Error::InvalidArgument(format!(
                            "weight Q puts no mass on the observed periods of unit `{}`",
                            u.id
                        )));
                    }
                    let qo = qo * (q.sum() / kept);
                    qo.transpose() * qo
                }
            };
            let per_obs = T::one() / T::of_usize(o);
            let scale = match (scaling, weight) {
                (RiskScaling::Unscaled, _) => T::one(),
                (RiskScaling::PerObservation, _) => per_obs,
                (RiskScaling::Auto, WeightSpec::LinearCombination(_)) => T::one(),
                (RiskScaling::Auto, _) if balanced => T::one(),
                (RiskScaling::Auto, _) => per_obs,
            };
            let ws = &w * &u.sigma;
            let tr_ws = ws.trace();
            units.push(PreparedUnit {
                complete: o == t,
                idx,
                y: u.y.clone(),
                sigma: u.sigma.clone(),
                w,
                ws,
                tr_ws,
                scale,
            });
        }
        Ok(Self { units, ids: problem.units.iter().map(|u| u.id.clone()).collect(), periods: t })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }
}

/// `(Λ_j + Σ_j)` factored, with the pieces of the risk estimate that depend
/// only on `Λ`.
pub(crate) struct UnitEval<T: Real> {
    pub chol: Chol<T>,
    /// `S = (Λ_j + Σ_j)⁻¹ Σ_j`
    pub s: DMatrix<T>,
    /// `M = S W S' = (Λ+Σ)⁻¹ Σ W Σ (Λ+Σ)⁻¹`
    pub m: DMatrix<T>,
    /// `tr(WΣ) − 2 tr((Λ+Σ)⁻¹ΣWΣ)`
    pub constant: T,
}

pub(crate) fn observed_lambda<T: Real>(pu: &PreparedUnit<T>, lambda: &DMatrix<T>) -> DMatrix<T> {
    if pu.complete {
        lambda.clone()
    } else {
        sub_matrix(lambda, &pu.idx)
    }
}

pub(crate) fn eval_unit<T: Real>(pu: &PreparedUnit<T>, lambda: &DMatrix<T>) -> Option<UnitEval<T>> {
    let a = observed_lambda(pu, lambda) + &pu.sigma;
    let chol = cholesky(&a)?;
    let s = chol.solve(&pu.sigma);
    let constant = pu.tr_ws - T::of(2.0) * trace_product(&s, &pu.ws);
    let m = &s * &pu.w * s.transpose();
    Some(UnitEval { chol, s, m, constant })
}

pub(crate) fn eval_all<T: Real>(prep: &Prepared<T>, lambda: &DMatrix<T>) -> Result<Vec<UnitEval<T>>> {
    prep.units
        .iter()
        .zip(&prep.ids)
        .map(|(pu, id)| eval_unit(pu, lambda).ok_or_else(|| Error::SolveFailure { unit: id.clone() }))
        .collect()
}

/// `URE_j` for residual `e = y_j − μ_j`, already multiplied by the unit scale.
pub(crate) fn unit_ure<T: Real>(pu: &PreparedUnit<T>, ev: &UnitEval<T>, e: &DVector<T>) -> T {
    pu.scale * (ev.constant + e.dot(&(&ev.m * e)))
}

/// Gradient of the scaled `URE_j` with respect to the observed block of `Λ`
/// at fixed center: `2M − (v u' + u v')`, `u = (Λ+Σ)⁻¹e`, `v = S W Σ u`.
pub(crate) fn unit_ure_grad<T: Real>(pu: &PreparedUnit<T>, ev: &UnitEval<T>, e: &DVector<T>) -> DMatrix<T> {
    let u = ev.chol.solve(e);
    let v = &ev.s * (&pu.ws * &u);
    let uv = &v * u.transpose();
    (&ev.m * T::of(2.0) - &uv - uv.transpose()) * pu.scale
}

/// `θ̂ = μ + Λ(Λ+Σ)⁻¹(y−μ)` from a factored `Λ+Σ`.
pub(crate) fn shrink_with<T: Real>(chol: &Chol<T>, lambda_j: &DMatrix<T>, y: &DVector<T>, mu: &DVector<T>) -> DVector<T> {
    let x = chol.solve(&(y - mu));
    mu + lambda_j * x
}

/// The linear shrinkage estimator for a single observation vector.
///
/// Returns `(I − Λ(Λ+Σ)⁻¹)μ + Λ(Λ+Σ)⁻¹y`, evaluated as `μ + Λ x` with
/// `(Λ+Σ)x = y − μ`, so `Λ = 0` returns `μ` exactly.
pub fn shrink<T: Real>(y: &DVector<T>, sigma: &DMatrix<T>, mu: &DVector<T>, lambda: &DMatrix<T>) -> Result<DVector<T>> {
    let n = y.len();
    if sigma.shape() != (n, n) || mu.len() != n || lambda.shape() != (n, n) {
        return Err(Error::Dimension("shrink: y, sigma, mu and lambda must agree".into()));
    }
    let chol = cholesky(&(lambda + sigma)).ok_or_else(|| Error::SolveFailure { unit: "<anonymous>".into() })?;
    Ok(shrink_with(&chol, lambda, y, mu))
}

/// Estimates `θ̂_j` for every unit at the given hyperparameters.
pub fn estimates<T: Real>(problem: &NormalMeansProblem<T>, hyper: &HyperParams<T>) -> Result<Vec<DVector<T>>> {
    check_lambda(problem, &hyper.lambda)?;
    let centers = resolve_centers(problem, &hyper.center)?;
    problem
        .units
        .iter()
        .zip(&centers)
        .map(|(u, mu)| {
            let idx = u.observed();
            let lam = if idx.len() == problem.periods { hyper.lambda.clone() } else { sub_matrix(&hyper.lambda, &idx) };
            let chol = cholesky(&(&lam + &u.sigma)).ok_or_else(|| Error::SolveFailure { unit: u.id.clone() })?;
            Ok(shrink_with(&chol, &lam, &u.y, mu))
        })
        .collect()
}

fn check_lambda<T: Real>(problem: &NormalMeansProblem<T>, lambda: &DMatrix<T>) -> Result<()> {
    let t = problem.periods;
    if lambda.shape() != (t, t) {
        return Err(Error::Dimension(format!("lambda must be {t}x{t}")));
    }
    Ok(())
}

/// Compound loss `(1/J) Σ_j c_j (θ̂_j − θ_j)' W_j (θ̂_j − θ_j)` against the
/// true means, with the scaling `c_j` chosen by [`RiskScaling::Auto`].
pub fn loss<T: Real>(estimates: &[DVector<T>], problem: &NormalMeansProblem<T>, weight: &WeightSpec<T>) -> Result<T> {
    loss_scaled(estimates, problem, weight, RiskScaling::Auto)
}

pub fn loss_scaled<T: Real>(
    estimates: &[DVector<T>],
    problem: &NormalMeansProblem<T>,
    weight: &WeightSpec<T>,
    scaling: RiskScaling,
) -> Result<T> {
    if estimates.len() != problem.len() {
        return Err(Error::Dimension("one estimate per unit required".into()));
    }
    let prep = Prepared::new(problem, weight, scaling)?;
    let mut total = T::zero();
    for ((u, pu), est) in problem.units.iter().zip(&prep.units).zip(estimates) {
        let theta = u.theta_true.as_ref().ok_or_else(|| Error::MissingTruth { unit: u.id.clone() })?;
        if est.len() != theta.len() {
            return Err(Error::Dimension(format!("estimate for unit `{}` has wrong length", u.id)));
        }
        let r = est - theta;
        total += pu.scale * r.dot(&(&pu.w * &r));
    }
    Ok(total / T::of_usize(problem.len()))
}

/// Unbiased risk estimate of `θ̂(μ, Λ)` under the weighted compound loss.
///
/// Per unit: `tr(WΣ) − 2 tr((Λ+Σ)⁻¹ΣWΣ) + (y−μ)'(Λ+Σ)⁻¹ΣWΣ(Λ+Σ)⁻¹(y−μ)`,
/// on the observed block of each unit and scaled by [`RiskScaling::Auto`].
pub fn ure<T: Real>(problem: &NormalMeansProblem<T>, hyper: &HyperParams<T>, weight: &WeightSpec<T>) -> Result<T> {
    ure_scaled(problem, hyper, weight, RiskScaling::Auto)
}

pub fn ure_scaled<T: Real>(
    problem: &NormalMeansProblem<T>,
    hyper: &HyperParams<T>,
    weight: &WeightSpec<T>,
    scaling: RiskScaling,
) -> Result<T> {
    check_lambda(problem, &hyper.lambda)?;
    let prep = Prepared::new(problem, weight, scaling)?;
    let centers = resolve_centers(problem, &hyper.center)?;
    let evals = eval_all(&prep, &hyper.lambda)?;
    let mut total = T::zero();
    for ((pu, ev), mu) in prep.units.iter().zip(&evals).zip(&centers) {
        total += unit_ure(pu, ev, &(&pu.y - mu));
    }
    Ok(total / T::of_usize(prep.len()))
}

/// Negative marginal log-likelihood of `y_j ~ N(μ_j, Λ_j + Σ_j)`, averaged over
/// units, without the `(o_j/2) log 2π` constants.
pub fn ebmle_negloglik<T: Real>(problem: &NormalMeansProblem<T>, hyper: &HyperParams<T>) -> Result<T> {
    check_lambda(problem, &hyper.lambda)?;
    let centers = resolve_centers(problem, &hyper.center)?;
    let mut total = T::zero();
    for (u, mu) in problem.units.iter().zip(&centers) {
        let idx = u.observed();
        let a = sub_matrix(&hyper.lambda, &idx) + &u.sigma;
        let chol = cholesky(&a).ok_or_else(|| Error::SolveFailure { unit: u.id.clone() })?;
        let e = &u.y - mu;
        total += T::of(0.5) * (logdet(&chol) + e.dot(&chol.solve(&e)));
    }
    Ok(total / T::of_usize(problem.len()))
}

pub(crate) fn logdet<T: Real>(chol: &Chol<T>) -> T {
    chol.l_dirty().diagonal().iter().fold(T::zero(), |s, &d| s + d.ln()) * T::of(2.0)
}

/// Shrinkage toward 0 evaluated through the eigendecomposition
/// `Σ^{-1/2} Λ Σ^{-1/2} = U D U'`:  `Σ^{1/2} U D(I+D)⁻¹ U' Σ^{-1/2} y`.
///
/// An independent route to [`shrink`] with `μ = 0`, used to cross-check it.
pub fn spectral_shrink_check<T: Real>(y: &DVector<T>, sigma: &DMatrix<T>, lambda: &DMatrix<T>) -> Result<DVector<T>> {
    let n = y.len();
    if sigma.shape() != (n, n) || lambda.shape() != (n, n) {
        return Err(Error::Dimension("spectral_shrink_check: dimensions disagree".into()));
    }
    let se = SymmetricEigen::try_new(sigma.clone(), T::epsilon(), 0).ok_or(Error::Eigen)?;
    if se.eigenvalues.iter().any(|&e| !(e > T::zero())) {
        return Err(Error::Precondition("sigma must be positive definite".into()));
    }
    let v = &se.eigenvectors;
    let half = v * DMatrix::from_diagonal(&se.eigenvalues.map(|e| e.sqrt())) * v.transpose();
    let inv_half = v * DMatrix::from_diagonal(&se.eigenvalues.map(|e| T::one() / e.sqrt())) * v.transpose();
    let snr = crate::linalg::symmetrize(&(&inv_half * lambda * &inv_half));
    let de = SymmetricEigen::try_new(snr, T::epsilon(), 0).ok_or(Error::Eigen)?;
    let factor = de.eigenvalues.map(|d| d / (T::one() + d));
    let u = &de.eigenvectors;
    Ok(half * (u * DMatrix::from_diagonal(&factor) * u.transpose()) * (inv_half * y))
}

/// Observed-block helper for callers holding a full `T`-vector center.
pub fn observed_center<T: Real>(mu: &DVector<T>, mask: &[bool]) -> DVector<T> {
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(t, _)| t).collect();
    sub_vector(mu, &idx)
}
