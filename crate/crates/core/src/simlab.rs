//! Monte Carlo risk comparisons on four data generating processes with
//! `T = 4`, and the risk table they produce.

use crate::constraints::DEFAULT_BALL_SCALE;
use crate::fit::{fit_ebmle, fit_oracle_with, fit_ure_cov, fit_ure_general, EbmleCenter, OracleOptions};
use crate::model::{FitResult, LambdaKind, LambdaStructure, NormalMeansProblem, Unit};
use crate::optimizer::OptimizerConfig;
use crate::scalar::Real;
use crate::shrinkage::{loss, WeightSpec};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use std::fmt::Write as _;

pub const PERIODS: usize = 4;
pub const WISHART_DF: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    /// `θ_j ~ N(0, I)`, `Σ_j ~ Wishart(Σ₀, 30)/30`.
    NormalNormal,
    /// As `NormalNormal` with `θ_jt ~ U[0, t/2]`.
    UniformNormal,
    /// First half `NormalNormal`; second half has `θ_j ~ N(1.5·1, 2·AR(0.7))`
    /// and `Σ_j ~ Wishart(2Σ₀, 30)/30`.
    GroupedNormal,
    /// `θ_jt = X_jt'β + U_jt`, `Σ_j = D_jΣ₀D_j` with `D_j = diag(X_jt'γ)`,
    /// `X_jt ~ U[0.5, 1.5]²`, `β = (1, 1)`, `γ = (0.5, 0.5)`, `U_jt ~ U[0, 0.3]`.
    ConditionalHet,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] =
        [Self::NormalNormal, Self::UniformNormal, Self::GroupedNormal, Self::ConditionalHet];

    pub fn name(self) -> &'static str {
        match self {
            Self::NormalNormal => "normal-normal",
            Self::UniformNormal => "uniform-normal",
            Self::GroupedNormal => "grouped-normal",
            Self::ConditionalHet => "conditional-het",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Covariate width of the generated problems.
    pub fn covariates(self) -> usize {
        if self == Self::ConditionalHet {
            2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub units: usize,
    pub reps: usize,
    pub seed: u64,
}

/// Toeplitz `Σ₀` with first row `(1, .75, .5, .25)`.
pub fn gen_sigma0<T: Real>() -> DMatrix<T> {
    let row = [1.0, 0.75, 0.5, 0.25];
    DMatrix::from_fn(PERIODS, PERIODS, |a, b| T::of(row[a.abs_diff(b)]))
}

fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z)
}

/// `Wishart(scale, df)` draw by the Bartlett decomposition `L A A' L'`.
pub fn wishart<T: Real, R: Rng + ?Sized>(scale: &DMatrix<T>, df: usize, rng: &mut R) -> Result<DMatrix<T>> {
    let p = scale.nrows();
    if df < p {
        return Err(Error::InvalidArgument(format!("Wishart needs df >= dimension, got {df} < {p}")));
    }
    let l = crate::linalg::cholesky(scale)
        .ok_or_else(|| Error::InvalidArgument("Wishart scale must be positive definite".into()))?
        .l();
    let mut a = DMatrix::<T>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new((df - i) as f64).expect("positive degrees of freedom");
        let c: f64 = chi.sample(rng);
        a[(i, i)] = T::of(c.sqrt());
        for j in 0..i {
            a[(i, j)] = normal(rng);
        }
    }
    let la = l * a;
    Ok(crate::linalg::symmetrize(&(&la * la.transpose())))
}

fn mvn<T: Real, R: Rng + ?Sized>(mean: &DVector<T>, cov: &DMatrix<T>, rng: &mut R) -> DVector<T> {
    let l = crate::linalg::cholesky(cov).expect("covariance is positive definite").l();
    let z = DVector::from_fn(mean.len(), |_, _| normal::<T, R>(rng));
    mean + l * z
}

fn wishart_sigma<T: Real, R: Rng + ?Sized>(scale: &DMatrix<T>, rng: &mut R) -> DMatrix<T> {
    loop {
        let s = wishart(scale, WISHART_DF, rng).expect("valid Wishart parameters") / T::of_usize(WISHART_DF);
        if crate::linalg::cholesky(&s).is_some() {
            return s;
        }
        log::warn!("Wishart draw was not positive definite; redrawing");
    }
}

/// Draws unit `index` of `units` for the scenario, with its truth attached.
pub fn draw_unit<T: Real, R: Rng + ?Sized>(kind: ScenarioKind, index: usize, units: usize, rng: &mut R) -> Unit<T> {
    let t = PERIODS;
    let sigma0 = gen_sigma0::<T>();
    let id = format!("{}", index + 1);
    let (theta, sigma, z) = match kind {
        ScenarioKind::NormalNormal => {
            let theta = DVector::from_fn(t, |_, _| normal::<T, R>(rng));
            (theta, wishart_sigma(&sigma0, rng), None)
        }
        ScenarioKind::UniformNormal => {
            let theta = DVector::from_fn(t, |p, _| {
                let u: f64 = rng.random();
                T::of(u * 0.5 * (p + 1) as f64)
            });
            (theta, wishart_sigma(&sigma0, rng), None)
        }
        ScenarioKind::GroupedNormal => {
            if index < units / 2 {
                let theta = DVector::from_fn(t, |_, _| normal::<T, R>(rng));
                (theta, wishart_sigma(&sigma0, rng), None)
            } else {
                let cov = DMatrix::from_fn(t, t, |a, b| T::of(2.0 * 0.7f64.powi(a.abs_diff(b) as i32)));
                let theta = mvn(&DVector::from_element(t, T::of(1.5)), &cov, rng);
                (theta, wishart_sigma(&(&sigma0 * T::of(2.0)), rng), None)
            }
        }
        ScenarioKind::ConditionalHet => {
            let ux = Uniform::new(0.5f64, 1.5).expect("valid range");
            let uu = Uniform::new(0.0f64, 0.3).expect("valid range");
            let x = DMatrix::<T>::from_fn(t, 2, |_, _| T::of(ux.sample(rng)));
            let theta = DVector::from_fn(t, |p, _| x[(p, 0)] + x[(p, 1)] + T::of(uu.sample(rng)));
            let d = DVector::from_fn(t, |p, _| T::of(0.5) * (x[(p, 0)] + x[(p, 1)]));
            let dm = DMatrix::from_diagonal(&d);
            let sigma = crate::linalg::symmetrize(&(&dm * &sigma0 * &dm));
            (theta, sigma, Some(x))
        }
    };
    let y = mvn(&theta, &sigma, rng);
    let unit = Unit::new(id, y, sigma).truth(theta);
    match z {
        Some(z) => unit.covariates(z),
        None => unit,
    }
}

pub fn draw_problem<T: Real, R: Rng + ?Sized>(kind: ScenarioKind, units: usize, rng: &mut R) -> NormalMeansProblem<T> {
    let list = (0..units).map(|j| draw_unit(kind, j, units, rng)).collect();
    NormalMeansProblem::new(PERIODS, kind.covariates(), list)
}

/// The generator for replication `rep`: one ChaCha stream per replication,
/// keyed by the master seed, the scenario and `J`.
pub fn replication_rng(scenario: &Scenario, rep: usize) -> ChaCha8Rng {
    let kind_tag = ScenarioKind::ALL.iter().position(|&k| k == scenario.kind).unwrap_or(0) as u64;
    let key = scenario
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((scenario.units as u64) << 8)
        .wrapping_add(kind_tag);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(rep as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimEstimator {
    Mle,
    /// URE with the center in the quantile box.
    Ure,
    /// URE with the covariate center; only for scenarios with covariates.
    UreCov,
    Ebmle,
    /// True-loss minimizer over the same class as `Ure`, center unrestricted.
    Oracle,
    /// True-loss minimizer over diagonal `Λ`.
    OracleDiagonal,
}

impl SimEstimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mle => "mle",
            Self::Ure => "ure-g",
            Self::UreCov => "ure-cov",
            Self::Ebmle => "ebmle",
            Self::Oracle => "oracle",
            Self::OracleDiagonal => "oracle-diag",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub estimators: Vec<SimEstimator>,
    pub structure: LambdaKind,
    pub tau: f64,
    pub ball_scale: f64,
    pub optimizer: OptimizerConfig,
    /// Run replications sequentially.
    pub deterministic: bool,
}

impl SimConfig {
    /// The estimators of the main comparison, with the diagonal oracle for
    /// the grouped scenario and the covariate URE for the covariate one.
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        let mut estimators = vec![SimEstimator::Mle, SimEstimator::Ure, SimEstimator::Ebmle, SimEstimator::Oracle];
        match kind {
            ScenarioKind::GroupedNormal => estimators.push(SimEstimator::OracleDiagonal),
            ScenarioKind::ConditionalHet => estimators.push(SimEstimator::UreCov),
            _ => {}
        }
        Self {
            estimators,
            structure: LambdaKind::Full,
            tau: crate::constraints::DEFAULT_TAU_SIMULATION,
            ball_scale: DEFAULT_BALL_SCALE,
            optimizer: OptimizerConfig { analytic_gradient: true, deterministic: true, ..Default::default() },
            deterministic: false,
        }
    }
}

/// Loss of every configured estimator on one replication; `None` marks a fit
/// that failed.
pub fn run_replication(scenario: &Scenario, rep: usize, config: &SimConfig) -> Vec<Option<f64>> {
    let mut rng = replication_rng(scenario, rep);
    let problem: NormalMeansProblem<f64> = draw_problem(scenario.kind, scenario.units, &mut rng);
    let structure = LambdaStructure::new(config.structure, PERIODS);
    let mut opt = config.optimizer.clone();
    opt.seed = opt.seed.wrapping_add(rep as u64);
    let score = |fit: &Result<FitResult<f64>>| -> Option<f64> {
        match fit {
            Ok(f) => loss(&f.estimates, &problem, &WeightSpec::Identity).ok(),
            Err(e) => {
                log::debug!("replication {rep}: fit failed: {e}");
                None
            }
        }
    };
    let ure = config
        .estimators
        .iter()
        .any(|e| matches!(e, SimEstimator::Ure | SimEstimator::Oracle))
        .then(|| fit_ure_general(&problem, structure, &WeightSpec::Identity, config.tau, &opt));
    let ebmle = config
        .estimators
        .iter()
        .any(|e| matches!(e, SimEstimator::Ebmle | SimEstimator::Oracle))
        .then(|| fit_ebmle(&problem, EbmleCenter::GrandMeanFree, structure, &opt));
    let warm: Vec<DMatrix<f64>> = [&ure, &ebmle]
        .into_iter()
        .filter_map(|f| f.as_ref().and_then(|r| r.as_ref().ok()).map(|f| f.hyperparams.lambda.clone()))
        .collect();
    config
        .estimators
        .iter()
        .map(|est| match est {
            SimEstimator::Mle => {
                let raw: Vec<DVector<f64>> = problem.units.iter().map(|u| u.y.clone()).collect();
                loss(&raw, &problem, &WeightSpec::Identity).ok()
            }
            SimEstimator::Ure => score(ure.as_ref().expect("computed above")),
            SimEstimator::Ebmle => score(ebmle.as_ref().expect("computed above")),
            SimEstimator::UreCov => score(&fit_ure_cov(&problem, structure, &WeightSpec::Identity, config.ball_scale, &opt)),
            SimEstimator::Oracle => {
                let options = OracleOptions { warm_starts: warm.clone(), ..Default::default() };
                score(&fit_oracle_with(&problem, structure, &WeightSpec::Identity, &opt, &options))
            }
            SimEstimator::OracleDiagonal => {
                let diag = LambdaStructure::new(LambdaKind::Diagonal, PERIODS);
                let options = OracleOptions {
                    warm_starts: warm.iter().map(|l| DMatrix::from_diagonal(&l.diagonal())).collect(),
                    ..Default::default()
                };
                score(&fit_oracle_with(&problem, diag, &WeightSpec::Identity, &opt, &options))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub scenario: ScenarioKind,
    pub units: usize,
    pub estimator: SimEstimator,
    pub mean_loss: f64,
    pub mc_se: f64,
    /// Mean loss over mean oracle loss on the replications where both succeeded.
    pub ratio_to_oracle: f64,
    /// Delta-method standard error of the ratio, using the paired covariance.
    pub ratio_se: f64,
    pub failures: usize,
    /// Per-replication losses, `NaN` where the fit failed.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RiskTable {
    pub rows: Vec<RiskRow>,
}

pub const RISK_TABLE_HEADER: &str = "scenario,J,estimator,mean_loss,mc_se,ratio_to_oracle,failures";

impl RiskTable {
    pub fn row(&self, kind: ScenarioKind, units: usize, estimator: SimEstimator) -> Option<&RiskRow> {
        self.rows.iter().find(|r| r.scenario == kind && r.units == units && r.estimator == estimator)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RISK_TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?},{:?},{}",
                r.scenario.name(),
                r.units,
                r.estimator.name(),
                r.mean_loss,
                r.mc_se,
                r.ratio_to_oracle,
                r.failures
            );
        }
        out
    }
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// `mean(a)/mean(b)` over paired finite entries with its delta-method SE.
pub fn ratio_with_se(a: &[f64], b: &[f64]) -> (f64, f64) {
    let pairs: Vec<(f64, f64)> = a.iter().zip(b).filter(|(x, y)| x.is_finite() && y.is_finite()).map(|(x, y)| (*x, *y)).collect();
    let n = pairs.len() as f64;
    if pairs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let r = ma / mb;
    if pairs.len() < 2 {
        return (r, f64::NAN);
    }
    let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cab += (x - ma) * (y - mb);
    }
    let d = n - 1.0;
    let (va, vb, cab) = (va / d, vb / d, cab / d);
    let var = (va / (mb * mb) + ma * ma * vb / mb.powi(4) - 2.0 * ma * cab / mb.powi(3)) / n;
    (r, var.max(0.0).sqrt())
}

/// Runs every replication of a scenario and summarizes the losses.
pub fn run_scenario(scenario: &Scenario, config: &SimConfig) -> Result<RiskTable> {
    if scenario.reps == 0 || scenario.units == 0 {
        return Err(Error::InvalidArgument("scenario needs at least one unit and one replication".into()));
    }
    if config.estimators.contains(&SimEstimator::UreCov) && scenario.kind.covariates() == 0 {
        return Err(Error::Precondition(format!("scenario `{}` has no covariates for ure-cov", scenario.kind.name())));
    }
    let per_rep: Vec<Vec<Option<f64>>> = if config.deterministic {
        (0..scenario.reps).map(|r| run_replication(scenario, r, config)).collect()
    } else {
        (0..scenario.reps).into_par_iter().map(|r| run_replication(scenario, r, config)).collect()
    };
    let column = |i: usize| -> Vec<f64> { per_rep.iter().map(|row| row[i].unwrap_or(f64::NAN)).collect() };
    let oracle = config.estimators.iter().position(|&e| e == SimEstimator::Oracle).map(column);
    let rows = config
        .estimators
        .iter()
        .enumerate()
        .map(|(i, &est)| {
            let losses = column(i);
            let ok: Vec<f64> = losses.iter().copied().filter(|x| x.is_finite()).collect();
            let (mean_loss, mc_se) = mean_se(&ok);
            let (ratio_to_oracle, ratio_se) = oracle.as_ref().map_or((f64::NAN, f64::NAN), |o| ratio_with_se(&losses, o));
            RiskRow {
                scenario: scenario.kind,
                units: scenario.units,
                estimator: est,
                mean_loss,
                mc_se,
                ratio_to_oracle,
                ratio_se,
                failures: losses.len() - ok.len(),
                losses,
            }
        })
        .collect();
    Ok(RiskTable { rows })
}

/// [`run_scenario`] over a list of sample sizes.
pub fn run_grid(kind: ScenarioKind, sizes: &[usize], reps: usize, seed: u64, config: &SimConfig) -> Result<RiskTable> {
    let mut table = RiskTable::default();
    for &units in sizes {
        let s = Scenario { kind, units, reps, seed };
        table.rows.extend(run_scenario(&s, config)?.rows);
    }
    Ok(table)
}
