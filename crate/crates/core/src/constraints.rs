//! Feasible sets for the hyperparameters: the quantile box for the center,
//! the OLS-scaled ball for the covariate coefficient, the operator-norm ball
//! used when forecasting, and the structured parametrizations of `Λ`.

use crate::linalg::{cholesky, min_eigenpair, solve_psd, spectral_norm_sym, symmetrize};
use crate::model::{LambdaKind, LambdaStructure, NormalMeansProblem};
use crate::scalar::Real;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub const DEFAULT_TAU_SIMULATION: f64 = 0.05;
pub const DEFAULT_TAU_DATA: f64 = 0.01;
pub const DEFAULT_BALL_SCALE: f64 = 1e3;
pub const DEFAULT_FORECAST_K: f64 = 100.0;

/// Penalty weight on negative eigenvalues of a Toeplitz `Λ`.
pub const TOEPLITZ_PENALTY: f64 = 1e6;

/// `{μ : |μ_t| ≤ upper_t}`, the symmetric box of the general-location estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct MuBox<T: Real> {
    pub lower: DVector<T>,
    pub upper: DVector<T>,
    pub tau: T,
}

impl<T: Real> MuBox<T> {
    /// The whole space, used for unrestricted centers.
    pub fn unbounded(periods: usize) -> Self {
        Self {
            lower: DVector::from_element(periods, -T::infinity()),
            upper: DVector::from_element(periods, T::infinity()),
            tau: T::zero(),
        }
    }

    pub fn contains(&self, mu: &DVector<T>, slack: T) -> bool {
        mu.iter().enumerate().all(|(t, &m)| m >= self.lower[t] - slack && m <= self.upper[t] + slack)
    }
}

/// `{γ : ‖γ‖ ≤ B ‖γ̂_OLS‖}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaBall<T: Real> {
    pub radius: T,
    pub gamma_ols: DVector<T>,
    pub scale: T,
}

/// `{Λ : σ₁(Λ) ≤ K σ₁((1/J) Σ y_j y_j')}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaBall<T: Real> {
    pub bound: T,
    pub k: T,
}

/// Per-period `(1−τ)` sample quantile of `|y_jt|` over the units observing
/// period `t`, taken as the `⌈(1−τ)m⌉`-th order statistic (1-based).
pub fn mu_box<T: Real>(problem: &NormalMeansProblem<T>, tau: T) -> Result<MuBox<T>> {
    if !(tau > T::zero() && tau < T::one()) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let mut columns: Vec<Vec<T>> = vec![Vec::new(); problem.periods];
    for u in &problem.units {
        for (a, t) in u.observed().into_iter().enumerate() {
            columns[t].push(u.y[a].abs());
        }
    }
    let mut upper = DVector::zeros(problem.periods);
    for (t, mut col) in columns.into_iter().enumerate() {
        if col.is_empty() {
            return Err(Error::Precondition(format!("period {} is observed by no unit", t + 1)));
        }
        col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let m = col.len();
        // The 1e-9 guard keeps e.g. 0.95 * 100 from rounding up to 96.
        let pos = ((T::one() - tau).as_f64() * m as f64 - 1e-9).ceil().max(1.0) as usize;
        upper[t] = col[pos.min(m) - 1];
    }
    Ok(MuBox { lower: -upper.clone(), upper, tau })
}

/// Pooled OLS of `y_j` on `Z_j` and the ball of radius `B‖γ̂_OLS‖`.
///
/// When every `Z_j` is identically zero the covariate center is the origin and
/// the ball collapses to `{0}`.
pub fn gamma_ball<T: Real>(problem: &NormalMeansProblem<T>, scale: T) -> Result<GammaBall<T>> {
    let k = problem.covariates;
    if k == 0 {
        return Err(Error::Precondition("covariate ball requires k > 0".into()));
    }
    let mut gram = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for u in &problem.units {
        let z = u
            .z
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("unit `{}` has no covariates", u.id)))?;
        gram += z.transpose() * z;
        rhs += z.transpose() * &u.y;
    }
    if gram.iter().all(|&v| v == T::zero()) {
        return Ok(GammaBall { radius: T::zero(), gamma_ols: DVector::zeros(k), scale });
    }
    let (gamma_ols, singular) = solve_psd(&gram, &rhs);
    if singular {
        let eig = nalgebra::SymmetricEigen::new(gram.clone());
        let top = eig.eigenvalues.iter().fold(T::zero(), |m, e| m.max(e.abs()));
        let dirs: Vec<String> = (0..k)
            .filter(|&i| eig.eigenvalues[i].abs() <= top * T::of(1e-10))
            .map(|i| format!("{:.3}", eig.eigenvectors.column(i).transpose()))
            .collect();
        return Err(Error::SingularGram(format!(
            "sum of Z_j'Z_j is singular; covariates look collinear along {}",
            dirs.join(", ")
        )));
    }
    Ok(GammaBall { radius: scale * gamma_ols.norm(), gamma_ols, scale })
}

/// Spectral bound for the forecasting `Λ`.
pub fn lambda_ball<T: Real>(problem: &NormalMeansProblem<T>, k: T) -> Result<LambdaBall<T>> {
    if !problem.is_balanced() {
        return Err(Error::Precondition("lambda ball is defined for balanced problems".into()));
    }
    let t = problem.periods;
    let mut second = DMatrix::zeros(t, t);
    for u in &problem.units {
        second += &u.y * u.y.transpose();
    }
    second /= T::of_usize(problem.len().max(1));
    Ok(LambdaBall { bound: k * spectral_norm_sym(&symmetrize(&second)), k })
}

/// Maps unconstrained parameters to `Λ`.
///
/// * `Full`: `LL'`, `L` lower triangular filled row by row.
/// * `Diagonal`: `diag(d_t²)`.
/// * `ScaledIdentity`: `λ² I`.
/// * `RankOneConstant`: `λ² 11'`.
/// * `Toeplitz`: symmetric Toeplitz matrix with first row `params`; not PSD
///   in general, see [`structure_penalty`].
pub fn realize_lambda<T: Real>(structure: &LambdaStructure, params: &DVector<T>) -> DMatrix<T> {
    let t = structure.periods;
    assert_eq!(params.len(), structure.param_count(), "parameter length does not match structure");
    match structure.kind {
        LambdaKind::Full => {
            let l = lower_from_params(t, params);
            symmetrize(&(&l * l.transpose()))
        }
        LambdaKind::Diagonal => DMatrix::from_diagonal(&params.map(|d| d * d)),
        LambdaKind::ScaledIdentity => DMatrix::identity(t, t) * (params[0] * params[0]),
        LambdaKind::RankOneConstant => DMatrix::from_element(t, t, params[0] * params[0]),
        LambdaKind::Toeplitz => DMatrix::from_fn(t, t, |a, b| params[a.abs_diff(b)]),
    }
}

pub(crate) fn lower_from_params<T: Real>(t: usize, params: &DVector<T>) -> DMatrix<T> {
    let mut l = DMatrix::zeros(t, t);
    let mut p = 0;
    for i in 0..t {
        for j in 0..=i {
            l[(i, j)] = params[p];
            p += 1;
        }
    }
    l
}

/// Objective penalty keeping Toeplitz `Λ` near the PSD cone:
/// `1e6 · max(0, −λ_min)²`. Zero for every other structure.
pub fn structure_penalty<T: Real>(structure: &LambdaStructure, lambda: &DMatrix<T>) -> T {
    if structure.kind != LambdaKind::Toeplitz {
        return T::zero();
    }
    let (lmin, _) = min_eigenpair(lambda);
    let neg = (-lmin).max(T::zero());
    T::of(TOEPLITZ_PENALTY) * neg * neg
}

/// Gradient of [`structure_penalty`] with respect to `Λ`.
pub(crate) fn structure_penalty_grad<T: Real>(structure: &LambdaStructure, lambda: &DMatrix<T>) -> Option<DMatrix<T>> {
    if structure.kind != LambdaKind::Toeplitz {
        return None;
    }
    let (lmin, v) = min_eigenpair(lambda);
    let neg = (-lmin).max(T::zero());
    if neg == T::zero() {
        return None;
    }
    Some(&v * v.transpose() * (-T::of(2.0 * TOEPLITZ_PENALTY) * neg))
}

/// Chain rule: given symmetric `G = ∂f/∂Λ`, returns `∂f/∂params`.
pub(crate) fn pullback<T: Real>(structure: &LambdaStructure, params: &DVector<T>, g: &DMatrix<T>) -> DVector<T> {
    let t = structure.periods;
    let two = T::of(2.0);
    match structure.kind {
        LambdaKind::Full => {
            let l = lower_from_params(t, params);
            let gl = g * l * two;
            let mut out = DVector::zeros(params.len());
            let mut p = 0;
            for i in 0..t {
                for j in 0..=i {
                    out[p] = gl[(i, j)];
                    p += 1;
                }
            }
            out
        }
        LambdaKind::Diagonal => DVector::from_fn(t, |i, _| two * params[i] * g[(i, i)]),
        LambdaKind::ScaledIdentity => DVector::from_element(1, two * params[0] * g.trace()),
        LambdaKind::RankOneConstant => DVector::from_element(1, two * params[0] * g.sum()),
        LambdaKind::Toeplitz => DVector::from_fn(t, |k, _| {
            let mut s = T::zero();
            for a in 0..t {
                for b in 0..t {
                    if a.abs_diff(b) == k {
                        s += g[(a, b)];
                    }
                }
            }
            s
        }),
    }
}

/// Parameters whose realization approximates a given PSD `Λ` (used for
/// starting points). Exact for matrices that lie in the structure.
pub fn params_from_lambda<T: Real>(structure: &LambdaStructure, lambda: &DMatrix<T>) -> DVector<T> {
    let t = structure.periods;
    let tn = T::of_usize(t);
    match structure.kind {
        LambdaKind::Full => {
            let scale = lambda.trace().abs() / tn;
            let mut ridge = T::zero();
            let l = loop {
                let a = lambda + DMatrix::identity(t, t) * ridge;
                if let Some(c) = cholesky(&a) {
                    break c.l();
                }
                ridge = if ridge == T::zero() {
                    (scale * T::of(1e-10)).max(T::of(1e-300).max(T::epsilon() * T::epsilon()))
                } else {
                    ridge * T::of(10.0)
                };
            };
            let mut out = DVector::zeros(structure.param_count());
            let mut p = 0;
            for i in 0..t {
                for j in 0..=i {
                    out[p] = l[(i, j)];
                    p += 1;
                }
            }
            out
        }
        LambdaKind::Diagonal => DVector::from_fn(t, |i, _| lambda[(i, i)].max(T::zero()).sqrt()),
        LambdaKind::ScaledIdentity => DVector::from_element(1, (lambda.trace() / tn).max(T::zero()).sqrt()),
        LambdaKind::RankOneConstant => DVector::from_element(1, (lambda.sum() / (tn * tn)).max(T::zero()).sqrt()),
        LambdaKind::Toeplitz => DVector::from_fn(t, |k, _| {
            let mut s = T::zero();
            for a in 0..t - k {
                s += lambda[(a, a + k)];
            }
            s / T::of_usize(t - k)
        }),
    }
}
