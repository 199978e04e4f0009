//! Estimators built on the shrinkage class: three URE fits (grand-mean center,
//! general center in a box, covariate center in a ball), the marginal
//! likelihood fit, the no-shrinkage MLE, the true-loss oracle and weighted-mean
//! summaries.

use crate::constraints::{
    gamma_ball, mu_box, params_from_lambda, pullback, realize_lambda, structure_penalty, structure_penalty_grad,
    MuBox,
};
use crate::linalg::{cholesky, min_eigenpair, psd_project, scatter_add, sub_matrix, symmetrize};
use crate::model::{
    Center, Diagnostics, FitResult, HyperParams, LambdaKind, LambdaStructure, NormalMeansProblem,
};
use crate::optimizer::{
    assemble_gamma, assemble_mu, minimize_from, start_points, solve_ball_qp, solve_box_qp, CenterSolution,
    LambdaObjective, Minimum, OptimizerConfig,
};
use crate::scalar::Real;
use crate::shrinkage::{
    estimates, eval_unit, logdet, observed_lambda, unit_ure, unit_ure_grad, Prepared, RiskScaling, WeightSpec,
};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Criterion {
    Ure,
    Likelihood,
    TrueLoss,
}

enum CenterMode<T: Real> {
    /// Observed center of each unit, held fixed.
    Fixed(Vec<DVector<T>>),
    /// `μ` profiled over a box (possibly unbounded).
    Box(MuBox<T>),
    /// `γ` profiled over a ball of the given radius.
    Ball(T),
}

struct Evaluation<T: Real> {
    value: T,
    grad: Option<DMatrix<T>>,
    center: Option<CenterSolution<T>>,
}

/// A hyperparameter criterion as a function of `Λ` with the center profiled out.
struct Profiled<'a, T: Real> {
    problem: &'a NormalMeansProblem<T>,
    prep: Prepared<T>,
    structure: LambdaStructure,
    criterion: Criterion,
    center: CenterMode<T>,
    /// `Σ_j⁻¹(y_j − θ_j)` for the true-loss criterion.
    scaled_errors: Vec<DVector<T>>,
}

impl<'a, T: Real> Profiled<'a, T> {
    fn new(
        problem: &'a NormalMeansProblem<T>,
        structure: LambdaStructure,
        criterion: Criterion,
        center: CenterMode<T>,
        weight: &WeightSpec<T>,
    ) -> Result<Self> {
        let scaling = if criterion == Criterion::Likelihood { RiskScaling::Unscaled } else { RiskScaling::Auto };
        let prep = Prepared::new(problem, weight, scaling)?;
        let mut scaled_errors = Vec::new();
        if criterion == Criterion::TrueLoss {
            for u in &problem.units {
                let theta = u.theta_true.as_ref().ok_or_else(|| Error::MissingTruth { unit: u.id.clone() })?;
                let chol = cholesky(&u.sigma).ok_or_else(|| Error::SolveFailure { unit: u.id.clone() })?;
                scaled_errors.push(chol.solve(&(&u.y - theta)));
            }
        }
        Ok(Self { problem, prep, structure, criterion, center, scaled_errors })
    }

    fn evaluate(&self, lambda: &DMatrix<T>, want_grad: bool) -> Option<Evaluation<T>> {
        let prep = &self.prep;
        let n = prep.len();
        let mut evals = Vec::with_capacity(n);
        for pu in &prep.units {
            evals.push(eval_unit(pu, lambda)?);
        }
        let inverses: Vec<DMatrix<T>> = if self.criterion == Criterion::Likelihood {
            evals.iter().map(|e| e.chol.inverse()).collect()
        } else {
            Vec::new()
        };
        let mats: Vec<&DMatrix<T>> = if self.criterion == Criterion::Likelihood {
            inverses.iter().collect()
        } else {
            evals.iter().map(|e| &e.m).collect()
        };
        let targets: Vec<DVector<T>> = match self.criterion {
            Criterion::TrueLoss => self
                .problem
                .units
                .iter()
                .zip(&prep.units)
                .zip(&self.scaled_errors)
                .map(|((u, pu), se)| {
                    let theta = u.theta_true.as_ref().expect("checked at construction");
                    theta - observed_lambda(pu, lambda) * se
                })
                .collect(),
            _ => prep.units.iter().map(|u| u.y.clone()).collect(),
        };
        let (centers, solution) = match &self.center {
            CenterMode::Fixed(c) => (c.clone(), None),
            CenterMode::Box(b) => {
                let (h, rhs) = assemble_mu(prep, &mats, &targets);
                let sol = solve_box_qp(&h, &rhs, &b.lower, &b.upper);
                let c = prep.units.iter().map(|pu| crate::linalg::sub_vector(&sol.value, &pu.idx)).collect();
                (c, Some(sol))
            }
            CenterMode::Ball(radius) => {
                let designs: Vec<&DMatrix<T>> =
                    self.problem.units.iter().map(|u| u.z.as_ref().expect("validated")).collect();
                let (h, rhs) = assemble_gamma(prep, &mats, &targets, &designs, self.problem.covariates);
                let sol = solve_ball_qp(&h, &rhs, *radius);
                let c = designs.iter().map(|z| *z * &sol.value).collect();
                (c, Some(sol))
            }
        };
        let t = prep.periods;
        let mut value = T::zero();
        let mut grad = if want_grad { Some(DMatrix::zeros(t, t)) } else { None };
        for (a, (pu, ev)) in prep.units.iter().zip(&evals).enumerate() {
            let e = &pu.y - &centers[a];
            let block = match self.criterion {
                Criterion::Ure => {
                    value += unit_ure(pu, ev, &e);
                    grad.as_ref().map(|_| unit_ure_grad(pu, ev, &e))
                }
                Criterion::Likelihood => {
                    let u = &inverses[a] * &e;
                    value += T::of(0.5) * (logdet(&ev.chol) + e.dot(&u));
                    grad.as_ref().map(|_| (&inverses[a] - &u * u.transpose()) * T::of(0.5))
                }
                Criterion::TrueLoss => {
                    let u = ev.chol.solve(&e);
                    let lam = observed_lambda(pu, lambda);
                    let theta = self.problem.units[a].theta_true.as_ref().expect("checked at construction");
                    let r = &centers[a] + lam * &u - theta;
                    let wr = &pu.w * &r;
                    value += pu.scale * r.dot(&wr);
                    grad.as_ref().map(|_| {
                        let p = ev.chol.solve(&(&pu.sigma * wr));
                        let pu_t = &p * u.transpose();
                        (&pu_t + pu_t.transpose()) * pu.scale
                    })
                }
            };
            if let (Some(g), Some(b)) = (grad.as_mut(), block) {
                if pu.complete {
                    *g += b;
                } else {
                    scatter_add(g, &pu.idx, &b, T::one());
                }
            }
        }
        let jn = T::of_usize(n);
        Some(Evaluation {
            value: value / jn,
            grad: grad.map(|g| symmetrize(&g) / jn),
            center: solution,
        })
    }
}

impl<T: Real> LambdaObjective<T> for Profiled<'_, T> {
    fn value(&self, params: &DVector<T>) -> T {
        let lambda = realize_lambda(&self.structure, params);
        match self.evaluate(&lambda, false) {
            Some(e) if e.value.finite() => e.value + structure_penalty(&self.structure, &lambda),
            _ => T::infinity(),
        }
    }

    fn value_and_gradient(&self, params: &DVector<T>) -> Option<(T, DVector<T>)> {
        let lambda = realize_lambda(&self.structure, params);
        match self.evaluate(&lambda, true) {
            Some(e) if e.value.finite() => {
                let mut g = e.grad.expect("requested");
                if let Some(pg) = structure_penalty_grad(&self.structure, &lambda) {
                    g += pg;
                }
                let value = e.value + structure_penalty(&self.structure, &lambda);
                Some((value, pullback(&self.structure, params, &g)))
            }
            _ => Some((T::infinity(), DVector::zeros(params.len()))),
        }
    }
}

/// Method-of-moments starting value: the PSD part of the centered second
/// moment minus the average sampling covariance, plus a small ridge so the
/// Cholesky parametrization starts away from a degenerate factor.
pub fn moment_lambda<T: Real>(problem: &NormalMeansProblem<T>, centers: &[DVector<T>]) -> DMatrix<T> {
    let t = problem.periods;
    let mut acc = DMatrix::<T>::zeros(t, t);
    let mut counts = DMatrix::<T>::zeros(t, t);
    let mut sig_diag = T::zero();
    let mut sig_count = T::zero();
    for (u, c) in problem.units.iter().zip(centers) {
        let idx = u.observed();
        let e = &u.y - c;
        let block = &e * e.transpose() - &u.sigma;
        scatter_add(&mut acc, &idx, &block, T::one());
        scatter_add(&mut counts, &idx, &DMatrix::from_element(idx.len(), idx.len(), T::one()), T::one());
        sig_diag += u.sigma.trace();
        sig_count += T::of_usize(idx.len());
    }
    let moment = acc.zip_map(&counts, |a, c| if c > T::zero() { a / c } else { T::zero() });
    let ridge = if sig_count > T::zero() { sig_diag / sig_count * T::of(0.01) } else { T::zero() };
    psd_project(&moment) + DMatrix::identity(t, t) * ridge
}

/// Shifts the constant diagonal of a Toeplitz `Λ` up to make it PSD.
fn repair_toeplitz<T: Real>(structure: &LambdaStructure, params: &mut DVector<T>) {
    if structure.kind != LambdaKind::Toeplitz {
        return;
    }
    let (lmin, _) = min_eigenpair(&realize_lambda(structure, params));
    if lmin < T::zero() {
        params[0] -= lmin;
    }
}

fn run<T: Real>(
    problem: &NormalMeansProblem<T>,
    objective: &Profiled<'_, T>,
    init_centers: &[DVector<T>],
    extra_starts: &[DMatrix<T>],
    config: &OptimizerConfig,
) -> Result<(Minimum<T>, DMatrix<T>, Evaluation<T>)> {
    let structure = objective.structure;
    let init = moment_lambda(problem, init_centers);
    let mut starts = start_points(&structure, &init, config);
    starts.extend(extra_starts.iter().map(|l| params_from_lambda(&structure, l)));
    let mut best = minimize_from(objective, &starts, config)?;
    repair_toeplitz(&structure, &mut best.params);
    let lambda = realize_lambda(&structure, &best.params);
    let eval = objective
        .evaluate(&lambda, false)
        .ok_or_else(|| Error::Optimizer("Λ + Σ_j is singular at the optimum".into()))?;
    Ok((best, lambda, eval))
}

fn finish<T: Real>(
    problem: &NormalMeansProblem<T>,
    center: Center<T>,
    lambda: DMatrix<T>,
    best: Minimum<T>,
    eval: Evaluation<T>,
) -> Result<FitResult<T>> {
    let hyper = HyperParams::new(center, lambda);
    let est = estimates(problem, &hyper)?;
    let (active, singular) = eval.center.map_or((Vec::new(), false), |c| (c.active, c.singular));
    Ok(FitResult {
        estimates: est,
        hyperparams: hyper,
        objective: eval.value,
        diagnostics: Diagnostics {
            iterations: best.iterations,
            restarts: best.restarts,
            converged: best.converged,
            gradient_norm: best.gradient_norm.as_f64(),
            active_bounds: active,
            singular_center: singular,
            evaluations: best.evaluations,
        },
        lambda_params: Some(best.params),
    })
}

/// `Λ` minimizing the URE with the center fixed at the grand mean.
pub fn fit_ure_grand_mean<T: Real>(
    problem: &NormalMeansProblem<T>,
    structure: LambdaStructure,
    weight: &WeightSpec<T>,
    config: &OptimizerConfig,
) -> Result<FitResult<T>> {
    check(problem, &structure)?;
    let centers = crate::model::resolve_centers(problem, &Center::GrandMean)?;
    let obj = Profiled::new(problem, structure, Criterion::Ure, CenterMode::Fixed(centers.clone()), weight)?;
    let (best, lambda, eval) = run(problem, &obj, &centers, &[], config)?;
    finish(problem, Center::GrandMean, lambda, best, eval)
}

/// `(μ, Λ)` minimizing the URE with `μ` in the `τ`-quantile box.
pub fn fit_ure_general<T: Real>(
    problem: &NormalMeansProblem<T>,
    structure: LambdaStructure,
    weight: &WeightSpec<T>,
    tau: T,
    config: &OptimizerConfig,
) -> Result<FitResult<T>> {
    check(problem, &structure)?;
    let bx = mu_box(problem, tau)?;
    fit_ure_in_box(problem, structure, weight, bx, config)
}

/// As [`fit_ure_general`] with an explicit box for `μ`.
pub fn fit_ure_in_box<T: Real>(
    problem: &NormalMeansProblem<T>,
    structure: LambdaStructure,
    weight: &WeightSpec<T>,
    bx: MuBox<T>,
    config: &OptimizerConfig,
) -> Result<FitResult<T>> {
    check(problem, &structure)?;
    let gm = problem.grand_mean();
    let start = gm.zip_zip_map(&bx.lower, &bx.upper, |m, l, u| m.max(l).min(u));
    let centers = crate::model::resolve_centers(problem, &Center::FixedVector(start))?;
    let obj = Profiled::new(problem, structure, Criterion::Ure, CenterMode::Box(bx), weight)?;
    let (best, lambda, eval) = run(problem, &obj, &centers, &[], config)?;
    let mu = eval.center.as_ref().expect("profiled").value.clone();
    finish(problem, Center::FixedVector(mu), lambda, best, eval)
}

/// `(γ, Λ)` minimizing the URE with center `Z_j γ`, `‖γ‖ ≤ B‖γ̂_OLS‖`.
pub fn fit_ure_cov<T: Real>(
    problem: &NormalMeansProblem<T>,
    structure: LambdaStructure,
    weight: &WeightSpec<T>,
    scale: T,
    config: &OptimizerConfig,
) -> Result<FitResult<T>> {
    check(problem, &structure)?;
    let ball = gamma_ball(problem, scale)?;
    let k = problem.covariates;
    let centers = crate::model::resolve_centers(problem, &Center::Coefficient(ball.gamma_ols.clone()))?;
    let obj = Profiled::new(problem, structure, Criterion::Ure, CenterMode::Ball(ball.radius), weight)?;
    let (best, lambda, eval) = run(problem, &obj, &centers, &[], config)?;
    let gamma = eval.center.as_ref().map_or_else(|| DVector::zeros(k), |c| c.value.clone());
    finish(problem, Center::Coefficient(gamma), lambda, best, eval)
}

/// Location handling of the marginal likelihood fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EbmleCenter {
    /// `μ` is an unrestricted `T`-vector, profiled by generalized least squares.
    #[default]
    GrandMeanFree,
    Zero,
}

/// `(μ, Λ)` maximizing the Gaussian marginal likelihood of the data.
/// The reported objective is the average negative log-likelihood.
pub fn fit_ebmle<T: Real>(
    problem: &NormalMeansProblem<T>,
    center: EbmleCenter,
    structure: LambdaStructure,
    config: &OptimizerConfig,
) -> Result<FitResult<T>> {
    check(problem, &structure)?;
    let t = problem.periods;
    let (mode, init) = match center {
        EbmleCenter::GrandMeanFree => (
            CenterMode::Box(MuBox::unbounded(t)),
            crate::model::resolve_centers(problem, &Center::GrandMean)?,
        ),
        EbmleCenter::Zero => {
            let zeros = crate::model::resolve_centers(problem, &Center::Zero)?;
            (CenterMode::Fixed(zeros.clone()), zeros)
        }
    };
    let obj = Profiled::new(problem, structure, Criterion::Likelihood, mode, &WeightSpec::Identity)?;
    let (best, lambda, eval) = run(problem, &obj, &init, &[], config)?;
    let c = match center {
        EbmleCenter::GrandMeanFree => Center::FixedVector(eval.center.as_ref().expect("profiled").value.clone()),
        EbmleCenter::Zero => Center::Zero,
    };
    finish(problem, c, lambda, best, eval)
}

/// Location handling of the oracle fit.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleCenter<T: Real> {
    /// `μ` unrestricted.
    Free,
    Zero,
    InBox(MuBox<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions<T: Real> {
    pub center: OracleCenter<T>,
    /// Additional starting values for `Λ`, e.g. fitted values of competing
    /// estimators on the same data.
    pub warm_starts: Vec<DMatrix<T>>,
}

impl<T: Real> Default for OracleOptions<T> {
    fn default() -> Self {
        Self { center: OracleCenter::Free, warm_starts: Vec::new() }
    }
}

/// Hyperparameters minimizing the true loss; needs `theta_true` on every unit.
pub fn fit_oracle<T: Real>(
    problem: &NormalMeansProblem<T>,
    structure: LambdaStructure,
    weight: &WeightSpec<T>,
    config: &OptimizerConfig,
) -> Result<FitResult<T>> {
    fit_oracle_with(problem, structure, weight, config, &OracleOptions::default())
}

pub fn fit_oracle_with<T: Real>(
    problem: &NormalMeansProblem<T>,
    structure: LambdaStructure,
    weight: &WeightSpec<T>,
    config: &OptimizerConfig,
    options: &OracleOptions<T>,
) -> Result<FitResult<T>> {
    check(problem, &structure)?;
    if let Some(u) = problem.units.iter().find(|u| u.theta_true.is_none()) {
        return Err(Error::MissingTruth { unit: u.id.clone() });
    }
    let t = problem.periods;
    let (mode, init) = match &options.center {
        OracleCenter::Free => (
            CenterMode::Box(MuBox::unbounded(t)),
            crate::model::resolve_centers(problem, &Center::GrandMean)?,
        ),
        OracleCenter::InBox(b) => (
            CenterMode::Box(b.clone()),
            crate::model::resolve_centers(problem, &Center::GrandMean)?,
        ),
        OracleCenter::Zero => {
            let zeros = crate::model::resolve_centers(problem, &Center::Zero)?;
            (CenterMode::Fixed(zeros.clone()), zeros)
        }
    };
    let profiled = matches!(mode, CenterMode::Box(_));
    let obj = Profiled::new(problem, structure, Criterion::TrueLoss, mode, weight)?;
    let (best, lambda, eval) = run(problem, &obj, &init, &options.warm_starts, config)?;
    let c = if profiled {
        Center::FixedVector(eval.center.as_ref().expect("profiled").value.clone())
    } else {
        Center::Zero
    };
    finish(problem, c, lambda, best, eval)
}

/// The unshrunk estimates `θ̂_j = y_j`. `Λ` is reported with an infinite
/// diagonal and the objective is the risk `(1/J) Σ tr Σ_j` (per observation on
/// unbalanced data).
pub fn mle_estimates<T: Real>(problem: &NormalMeansProblem<T>) -> Result<FitResult<T>> {
    problem.ensure_valid()?;
    let prep = Prepared::new(problem, &WeightSpec::Identity, RiskScaling::Auto)?;
    let risk = prep.units.iter().fold(T::zero(), |s, pu| s + pu.scale * pu.tr_ws) / T::of_usize(problem.len().max(1));
    let t = problem.periods;
    Ok(FitResult {
        estimates: problem.units.iter().map(|u| u.y.clone()).collect(),
        hyperparams: HyperParams::new(Center::Zero, DMatrix::identity(t, t) * T::infinity()),
        objective: risk,
        diagnostics: Diagnostics { converged: true, ..Default::default() },
        lambda_params: None,
    })
}

/// Selects one of the estimators for callers that dispatch at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator<T: Real> {
    UreGrandMean,
    UreGeneral { tau: T },
    UreCov { scale: T },
    Ebmle(EbmleCenter),
    Mle,
}

impl<T: Real> Estimator<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::UreGrandMean => "ure-m",
            Self::UreGeneral { .. } => "ure-g",
            Self::UreCov { .. } => "ure-cov",
            Self::Ebmle(_) => "ebmle",
            Self::Mle => "mle",
        }
    }

    pub fn fit(
        &self,
        problem: &NormalMeansProblem<T>,
        structure: LambdaStructure,
        weight: &WeightSpec<T>,
        config: &OptimizerConfig,
    ) -> Result<FitResult<T>> {
        match self {
            Self::UreGrandMean => fit_ure_grand_mean(problem, structure, weight, config),
            Self::UreGeneral { tau } => fit_ure_general(problem, structure, weight, *tau, config),
            Self::UreCov { scale } => fit_ure_cov(problem, structure, weight, *scale, config),
            Self::Ebmle(c) => fit_ebmle(problem, *c, structure, config),
            Self::Mle => mle_estimates(problem),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSummary<T: Real> {
    /// `w'θ̂_j` per unit, with `w` restricted to the observed periods and
    /// rescaled to sum to one.
    pub values: Vec<T>,
    pub fit: FitResult<T>,
    /// The hyperparameters were reused from a full-vector fit rather than
    /// tuned for `w'θ`, which is generally suboptimal.
    pub reused: bool,
}

/// Estimates of the weighted means `w'θ_j`.
///
/// By default the hyperparameters are refit under the loss weight `ww'`;
/// passing `reuse` skips the refit and summarizes that fit instead.
pub fn summarize_weighted_mean<T: Real>(
    problem: &NormalMeansProblem<T>,
    w: &DVector<T>,
    estimator: &Estimator<T>,
    structure: LambdaStructure,
    config: &OptimizerConfig,
    reuse: Option<&FitResult<T>>,
) -> Result<WeightedSummary<T>> {
    let t = problem.periods;
    if w.len() != t {
        return Err(Error::Dimension(format!("w must have length T = {t}")));
    }
    let total = w.sum();
    if w.iter().any(|&v| !(v >= T::zero())) || (total - T::one()).abs() > T::of(1e-9) {
        return Err(Error::InvalidArgument("w must be nonnegative and sum to 1".into()));
    }
    let fit = match reuse {
        Some(f) => f.clone(),
        None => estimator.fit(problem, structure, &WeightSpec::LinearCombination(DMatrix::from_row_slice(1, t, w.as_slice())), config)?,
    };
    let mut values = Vec::with_capacity(problem.len());
    for (u, est) in problem.units.iter().zip(&fit.estimates) {
        let idx = u.observed();
        let wo = DVector::from_iterator(idx.len(), idx.iter().map(|&i| w[i]));
        let mass = wo.sum();
        if !(mass > T::zero()) {
            return Err(Error::InvalidArgument(format!("w puts no mass on the periods observed by unit `{}`", u.id)));
        }
        values.push(wo.dot(est) / mass);
    }
    Ok(WeightedSummary { values, fit, reused: reuse.is_some() })
}

fn check<T: Real>(problem: &NormalMeansProblem<T>, structure: &LambdaStructure) -> Result<()> {
    problem.ensure_valid()?;
    if problem.is_empty() {
        return Err(Error::InvalidArgument("problem has no units".into()));
    }
    if structure.periods != problem.periods {
        return Err(Error::Dimension(format!(
            "structure has T = {}, problem has T = {}",
            structure.periods, problem.periods
        )));
    }
    Ok(())
}

/// `Λ` restricted to the observed block of each unit; convenience for callers
/// reproducing estimates by hand.
pub fn unit_lambda<T: Real>(lambda: &DMatrix<T>, mask: &[bool]) -> DMatrix<T> {
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(t, _)| t).collect();
    sub_matrix(lambda, &idx)
}
