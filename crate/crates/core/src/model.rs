//! Domain types shared across the crate: the normal means problem, the
//! hyperparameter point, structural restrictions on the prior covariance and
//! fit results.

use crate::linalg::{cholesky, symmetrize, sym_eigenvalues};
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use std::fmt;

/// One unit `j`: an observed subvector of the `T`-vector of least squares
/// estimates together with its known sampling covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit<T: Real> {
    pub id: String,
    /// Observed entries, length `o_j`.
    pub y: DVector<T>,
    /// Sampling covariance of the observed entries, `o_j x o_j`.
    pub sigma: DMatrix<T>,
    /// `true` where the period is observed, length `T`.
    pub mask: Vec<bool>,
    /// Optional covariates, `o_j x k`.
    pub z: Option<DMatrix<T>>,
    /// Ground truth, only available in simulations.
    pub theta_true: Option<DVector<T>>,
}

impl<T: Real> Unit<T> {
    /// A fully observed unit. `sigma` is symmetrized.
    pub fn new(id: impl Into<String>, y: DVector<T>, sigma: DMatrix<T>) -> Self {
        let n = y.len();
        Self {
            id: id.into(),
            y,
            sigma: symmetrize(&sigma),
            mask: vec![true; n],
            z: None,
            theta_true: None,
        }
    }

    /// A partially observed unit; `y` and `sigma` cover the observed periods only.
    pub fn with_mask(
        id: impl Into<String>,
        y: DVector<T>,
        sigma: DMatrix<T>,
        mask: Vec<bool>,
    ) -> Self {
        Self {
            id: id.into(),
            y,
            sigma: symmetrize(&sigma),
            mask,
            z: None,
            theta_true: None,
        }
    }

    pub fn covariates(mut self, z: DMatrix<T>) -> Self {
        self.z = Some(z);
        self
    }

    pub fn truth(mut self, theta: DVector<T>) -> Self {
        self.theta_true = Some(theta);
        self
    }

    /// Indices of the observed periods (the rows of `O_j`).
    pub fn observed(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(t, _)| t).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}

/// `J` units, `T` periods and covariate width `k` (0 when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMeansProblem<T: Real> {
    pub units: Vec<Unit<T>>,
    pub periods: usize,
    pub covariates: usize,
}

/// A single broken invariant. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub unit: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.unit {
            Some(u) => write!(f, "unit `{}`: {}", u, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl<T: Real> NormalMeansProblem<T> {
    pub fn new(periods: usize, covariates: usize, units: Vec<Unit<T>>) -> Self {
        Self { units, periods, covariates }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn is_balanced(&self) -> bool {
        self.units.iter().all(|u| u.is_complete())
    }

    pub fn has_truth(&self) -> bool {
        self.units.iter().all(|u| u.theta_true.is_some())
    }

    /// Per-period mean of the observed entries. On balanced data this is `ȳ_J`;
    /// on unbalanced data each period averages over the units observing it.
    /// Periods observed by nobody get 0.
    pub fn grand_mean(&self) -> DVector<T> {
        let mut sum = DVector::zeros(self.periods);
        let mut count = vec![0usize; self.periods];
        for u in &self.units {
            for (a, t) in u.observed().into_iter().enumerate() {
                sum[t] += u.y[a];
                count[t] += 1;
            }
        }
        for t in 0..self.periods {
            if count[t] > 0 {
                sum[t] /= T::of_usize(count[t]);
            }
        }
        sum
    }

    /// Checks every structural invariant and returns the list of violations
    /// (empty when the problem is valid).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.periods == 0 {
            out.push(Violation { unit: None, message: "T must be positive".into() });
        }
        if self.units.is_empty() {
            out.push(Violation { unit: None, message: "problem has no units".into() });
        }
        for u in &self.units {
            let mut bad = |m: String| out.push(Violation { unit: Some(u.id.clone()), message: m });
            if u.mask.len() != self.periods {
                bad(format!("mask length {} differs from T = {}", u.mask.len(), self.periods));
                continue;
            }
            let o = u.n_observed();
            if o == 0 {
                bad("empty mask".into());
                continue;
            }
            if u.y.len() != o {
                bad(format!("y has length {} but mask observes {} periods", u.y.len(), o));
                continue;
            }
            if u.sigma.nrows() != o || u.sigma.ncols() != o {
                bad(format!("sigma is {}x{}, expected {}x{}", u.sigma.nrows(), u.sigma.ncols(), o, o));
                continue;
            }
            if u.y.iter().chain(u.sigma.iter()).any(|v| !v.finite()) {
                bad("non-finite entry in y or sigma".into());
                continue;
            }
            let scale = u.sigma.iter().fold(T::zero(), |m, v| m.max(v.abs()));
            let asym = (&u.sigma - u.sigma.transpose()).iter().fold(T::zero(), |m, v| m.max(v.abs()));
            if asym > T::of(1e-12) * scale {
                bad("sigma is not symmetric".into());
            }
            let s = symmetrize(&u.sigma);
            let min_ev = sym_eigenvalues(&s).first().copied().unwrap_or(T::zero());
            if !(min_ev > T::zero()) || cholesky(&s).is_none() {
                bad(format!("sigma is not positive definite (smallest eigenvalue {})", min_ev));
            }
            if self.covariates > 0 {
                match &u.z {
                    None => bad(format!("missing covariates (k = {})", self.covariates)),
                    Some(z) if z.nrows() != o || z.ncols() != self.covariates => bad(format!(
                        "z is {}x{}, expected {}x{}",
                        z.nrows(),
                        z.ncols(),
                        o,
                        self.covariates
                    )),
                    _ => {}
                }
            }
            if let Some(th) = &u.theta_true {
                if th.len() != o {
                    bad(format!("theta_true has length {}, expected {}", th.len(), o));
                }
            }
        }
        out
    }

    pub(crate) fn ensure_valid(&self) -> crate::Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::InvalidProblem(v))
        }
    }
}

/// Parametrized family of prior covariance matrices `Λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LambdaKind {
    Full,
    Diagonal,
    Toeplitz,
    ScaledIdentity,
    RankOneConstant,
}

impl LambdaKind {
    pub fn name(self) -> &'static str {
        match self {
            LambdaKind::Full => "full",
            LambdaKind::Diagonal => "diag",
            LambdaKind::Toeplitz => "toeplitz",
            LambdaKind::ScaledIdentity => "scalar",
            LambdaKind::RankOneConstant => "rank1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => LambdaKind::Full,
            "diag" | "diagonal" => LambdaKind::Diagonal,
            "toeplitz" => LambdaKind::Toeplitz,
            "scalar" | "scaled-identity" => LambdaKind::ScaledIdentity,
            "rank1" | "rank-one" => LambdaKind::RankOneConstant,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LambdaStructure {
    pub kind: LambdaKind,
    pub periods: usize,
}

impl LambdaStructure {
    pub fn new(kind: LambdaKind, periods: usize) -> Self {
        Self { kind, periods }
    }

    pub fn param_count(&self) -> usize {
        let t = self.periods;
        match self.kind {
            LambdaKind::Full => t * (t + 1) / 2,
            LambdaKind::Diagonal | LambdaKind::Toeplitz => t,
            LambdaKind::ScaledIdentity | LambdaKind::RankOneConstant => 1,
        }
    }
}

/// Where the data are shrunk to.
#[derive(Debug, Clone, PartialEq)]
pub enum Center<T: Real> {
    /// The origin.
    Zero,
    FixedVector(DVector<T>),
    /// Per-period mean of the data.
    GrandMean,
    /// `Z_j γ`.
    Coefficient(DVector<T>),
}

/// A point `(center, Λ)` of the hyperparameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams<T: Real> {
    pub center: Center<T>,
    pub lambda: DMatrix<T>,
}

impl<T: Real> HyperParams<T> {
    pub fn new(center: Center<T>, lambda: DMatrix<T>) -> Self {
        Self { center, lambda }
    }

    /// `Λ` passes the PSD check with eigenvalue floor `-1e-10 σ₁(Λ)`.
    pub fn lambda_is_psd(&self) -> bool {
        let ev = sym_eigenvalues(&symmetrize(&self.lambda));
        let top = ev.iter().fold(T::zero(), |m, e| m.max(e.abs()));
        ev.first().map_or(true, |&e| e >= -T::of(1e-10) * top)
    }

    /// The observed part of the center for every unit, `O_j μ` or `Z_j γ`.
    pub fn unit_centers(&self, problem: &NormalMeansProblem<T>) -> crate::Result<Vec<DVector<T>>> {
        resolve_centers(problem, &self.center)
    }
}

pub(crate) fn resolve_centers<T: Real>(
    problem: &NormalMeansProblem<T>,
    center: &Center<T>,
) -> crate::Result<Vec<DVector<T>>> {
    use crate::linalg::sub_vector;
    let full = |mu: &DVector<T>| -> crate::Result<Vec<DVector<T>>> {
        if mu.len() != problem.periods {
            return Err(crate::Error::Dimension(format!(
                "center has length {}, expected T = {}",
                mu.len(),
                problem.periods
            )));
        }
        Ok(problem.units.iter().map(|u| sub_vector(mu, &u.observed())).collect())
    };
    match center {
        Center::Zero => Ok(problem.units.iter().map(|u| DVector::zeros(u.y.len())).collect()),
        Center::FixedVector(mu) => full(mu),
        Center::GrandMean => full(&problem.grand_mean()),
        Center::Coefficient(gamma) => {
            if problem.covariates == 0 || gamma.len() != problem.covariates {
                return Err(crate::Error::Precondition(
                    "coefficient center requires k > 0 and a length-k gamma".into(),
                ));
            }
            problem
                .units
                .iter()
                .map(|u| {
                    u.z.as_ref().map(|z| z * gamma).ok_or_else(|| {
                        crate::Error::Precondition(format!("unit `{}` has no covariates", u.id))
                    })
                })
                .collect()
        }
    }
}

/// Optimizer bookkeeping reported with every fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Periods (or coefficient indices) whose bound is active at the solution.
    pub active_bounds: Vec<usize>,
    /// The center step needed a pseudo-inverse because its Hessian was singular.
    pub singular_center: bool,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T: Real> {
    /// `θ̂_j` on the observed periods of each unit.
    pub estimates: Vec<DVector<T>>,
    pub hyperparams: HyperParams<T>,
    /// Risk estimate (or negative log-likelihood, or true loss) at the optimum.
    pub objective: T,
    pub diagnostics: Diagnostics,
    /// Raw parameter vector of `Λ` in its structure, when one was optimized.
    pub lambda_params: Option<DVector<T>>,
}
