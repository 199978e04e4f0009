//! Command implementations behind the `panelshrink` binary. Each command
//! reads its inputs, runs the library and writes plain CSV/JSON outputs.

pub mod io;

use crate::io::{fmt_num, out_err, rows_of, Num};
use panelshrink::constraints::{DEFAULT_BALL_SCALE, DEFAULT_FORECAST_K, DEFAULT_TAU_SIMULATION};
use panelshrink::fit::{EbmleCenter, Estimator};
use panelshrink::forecast::{fit_upe, predict_next};
use panelshrink::model::{Center, Diagnostics, LambdaKind, LambdaStructure};
use panelshrink::optimizer::OptimizerConfig;
use panelshrink::panel::{aggregate_effects, fit_panel, to_normal_means, variance_decomposition};
use panelshrink::shrinkage::WeightSpec;
use panelshrink::simlab::{run_grid, ScenarioKind, SimConfig};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Output(String),
    #[error("{0}")]
    NonConvergence(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Precondition(String),
}

impl CliError {
    /// 1 input, 2 non-convergence, 3 precondition violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) | Self::Output(_) => 1,
            Self::NonConvergence(_) | Self::Numerical(_) => 2,
            Self::Precondition(_) => 3,
        }
    }
}

impl From<panelshrink::Error> for CliError {
    fn from(e: panelshrink::Error) -> Self {
        use panelshrink::Error as E;
        match e {
            E::InvalidProblem(_) | E::Dimension(_) | E::InvalidArgument(_) | E::MissingTruth { .. } => {
                Self::Input(e.to_string())
            }
            E::Precondition(_) | E::SingularGram(_) => Self::Precondition(e.to_string()),
            E::SolveFailure { .. } | E::Optimizer(_) | E::Eigen => Self::Numerical(e.to_string()),
        }
    }
}

/// Settings shared by the commands that optimize.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub deterministic: bool,
    pub seed: u64,
    pub max_iters: Option<usize>,
    pub analytic_gradient: bool,
}

impl RunOptions {
    pub fn optimizer(&self) -> OptimizerConfig {
        let mut c = OptimizerConfig {
            deterministic: self.deterministic,
            seed: self.seed,
            analytic_gradient: self.analytic_gradient,
            ..Default::default()
        };
        if let Some(m) = self.max_iters {
            c.max_iters = m;
        }
        c
    }
}

pub fn parse_structure(s: &str) -> Result<LambdaKind, CliError> {
    LambdaKind::parse(s).ok_or_else(|| {
        CliError::Input(format!("unknown structure `{s}` (expected full, diag, toeplitz, scalar or rank1)"))
    })
}

/// `start:end:step`, a comma-separated list, or a single size.
pub fn parse_j_range(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Input(format!("invalid J range `{s}` (expected e.g. 100:1000:100)"));
    let parts: Vec<&str> = s.split(':').collect();
    let sizes = match parts.as_slice() {
        [start, end, step] => {
            let (a, b, st): (usize, usize, usize) = (
                start.trim().parse().map_err(|_| bad())?,
                end.trim().parse().map_err(|_| bad())?,
                step.trim().parse().map_err(|_| bad())?,
            );
            if st == 0 || a > b {
                return Err(bad());
            }
            (a..=b).step_by(st).collect()
        }
        [single] => single
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad()),
    };
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(bad());
    }
    Ok(sizes)
}

#[derive(Serialize)]
struct DecompositionJson {
    total: Num,
    within: Num,
    between: Num,
}

#[derive(Serialize)]
struct PanelReport {
    periods: usize,
    units: usize,
    cells: usize,
    records: usize,
    dof: i64,
    beta_hat: Vec<Num>,
    sigma2_hat: Num,
    variance_decomposition: DecompositionJson,
    aggregate_effects: Vec<(String, Num)>,
}

/// Panel CSV to problem JSON, with a JSON report of `β̂`, `σ̂²` and the
/// variance decomposition of the cell effects.
pub fn cmd_preprocess(csv: &Path, out: &Path, report: Option<&Path>, demean: bool) -> Result<(), CliError> {
    let panel = io::read_panel(csv)?;
    let fit = fit_panel(&panel)?;
    let problem = to_normal_means(&fit, demean)?;
    io::write_problem(out, &problem)?;
    if let Some(path) = report {
        let d = variance_decomposition(&fit);
        let rep = PanelReport {
            periods: fit.periods,
            units: fit.unit_ids.len(),
            cells: fit.alpha_hat.len(),
            records: panel.records.len(),
            dof: fit.dof,
            beta_hat: fit.beta_hat.iter().map(|&b| Num(b)).collect(),
            sigma2_hat: Num(fit.sigma2_hat),
            variance_decomposition: DecompositionJson { total: Num(d.total), within: Num(d.within), between: Num(d.between) },
            aggregate_effects: aggregate_effects(&fit).into_iter().map(|(id, a)| (id, Num(a))).collect(),
        };
        io::write_json(path, &rep)?;
    }
    Ok(())
}

pub fn parse_estimator(name: &str, tau: f64, ball_scale: f64) -> Result<Estimator<f64>, CliError> {
    Ok(match name {
        "ure-m" => Estimator::UreGrandMean,
        "ure-g" => Estimator::UreGeneral { tau },
        "ure-cov" => Estimator::UreCov { scale: ball_scale },
        "ebmle" => Estimator::Ebmle(EbmleCenter::GrandMeanFree),
        "mle" => Estimator::Mle,
        other => {
            return Err(CliError::Input(format!(
                "unknown estimator `{other}` (expected ure-m, ure-g, ure-cov, ebmle or mle)"
            )))
        }
    })
}

#[derive(Serialize)]
struct CenterJson {
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<Vec<Num>>,
}

#[derive(Serialize)]
struct DiagnosticsJson {
    iterations: usize,
    restarts: usize,
    converged: bool,
    gradient_norm: Num,
    active_bounds: Vec<usize>,
    singular_center: bool,
    evaluations: usize,
}

impl From<&Diagnostics> for DiagnosticsJson {
    fn from(d: &Diagnostics) -> Self {
        Self {
            iterations: d.iterations,
            restarts: d.restarts,
            converged: d.converged,
            gradient_norm: Num(d.gradient_norm),
            active_bounds: d.active_bounds.clone(),
            singular_center: d.singular_center,
            evaluations: d.evaluations,
        }
    }
}

#[derive(Serialize)]
struct FitJson {
    estimator: &'static str,
    structure: &'static str,
    center: CenterJson,
    lambda: Vec<Vec<Num>>,
    objective: Num,
    diagnostics: DiagnosticsJson,
}

fn center_json(c: &Center<f64>) -> CenterJson {
    let vals = |v: &nalgebra::DVector<f64>| Some(v.iter().map(|&x| Num(x)).collect());
    match c {
        Center::Zero => CenterJson { kind: "zero", value: None },
        Center::GrandMean => CenterJson { kind: "grand-mean", value: None },
        Center::FixedVector(m) => CenterJson { kind: "vector", value: vals(m) },
        Center::Coefficient(g) => CenterJson { kind: "coefficient", value: vals(g) },
    }
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub problem: PathBuf,
    pub estimator: String,
    pub structure: String,
    pub weights: Option<PathBuf>,
    pub tau: f64,
    pub ball_scale: f64,
    pub out_dir: PathBuf,
}

impl FitArgs {
    pub fn new(problem: PathBuf, estimator: &str, out_dir: PathBuf) -> Self {
        Self {
            problem,
            estimator: estimator.into(),
            structure: "full".into(),
            weights: None,
            tau: DEFAULT_TAU_SIMULATION,
            ball_scale: DEFAULT_BALL_SCALE,
            out_dir,
        }
    }
}

/// Fits one estimator and writes `estimates.csv` and `fit.json` into the
/// output directory. A fit that hits the iteration limit is still written,
/// then reported as [`CliError::NonConvergence`].
pub fn cmd_fit(args: &FitArgs, run: &RunOptions) -> Result<(), CliError> {
    let estimator = parse_estimator(&args.estimator, args.tau, args.ball_scale)?;
    let kind = parse_structure(&args.structure)?;
    let problem = io::read_problem(&args.problem)?;
    let weight = match &args.weights {
        Some(p) => io::read_weights(p, problem.periods)?,
        None => WeightSpec::Identity,
    };
    let structure = LambdaStructure::new(kind, problem.periods);
    let fit = estimator.fit(&problem, structure, &weight, &run.optimizer())?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::Output(format!("{}: {e}", args.out_dir.display())))?;
    io::write_estimates(&args.out_dir.join("estimates.csv"), &problem, &fit.estimates)?;
    let json = FitJson {
        estimator: estimator.name(),
        structure: kind.name(),
        center: center_json(&fit.hyperparams.center),
        lambda: rows_of(&fit.hyperparams.lambda),
        objective: Num(fit.objective),
        diagnostics: (&fit.diagnostics).into(),
    };
    io::write_json(&args.out_dir.join("fit.json"), &json)?;
    if !fit.diagnostics.converged {
        return Err(CliError::NonConvergence(format!(
            "gradient norm {} after {} iterations",
            fmt_num(fit.diagnostics.gradient_norm),
            fit.diagnostics.iterations
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct ForecastJson {
    structure: &'static str,
    k: Num,
    bound: Num,
    lambda: Vec<Vec<Num>>,
    objective: Num,
    diagnostics: DiagnosticsJson,
}

/// Writes `unit,forecast` to `out`, and the tuned `Λ` to `fit_out` if given.
pub fn cmd_forecast(
    problem_path: &Path,
    k: f64,
    structure: &str,
    out: &Path,
    fit_out: Option<&Path>,
    run: &RunOptions,
) -> Result<(), CliError> {
    let kind = parse_structure(structure)?;
    let problem = io::read_problem(problem_path)?;
    let fit = fit_upe(&problem, LambdaStructure::new(kind, problem.periods), k, &run.optimizer())?;
    let forecasts = predict_next(&problem, &fit.lambda)?;
    let mut w = io::csv_writer(out)?;
    w.write_record(["unit", "forecast"]).map_err(out_err)?;
    for (u, f) in problem.units.iter().zip(&forecasts) {
        w.write_record([u.id.as_str(), &fmt_num(*f)]).map_err(out_err)?;
    }
    w.flush().map_err(|e| CliError::Output(e.to_string()))?;
    if let Some(path) = fit_out {
        let json = ForecastJson {
            structure: kind.name(),
            k: Num(k),
            bound: Num(fit.ball.bound),
            lambda: rows_of(&fit.lambda),
            objective: Num(fit.objective),
            diagnostics: (&fit.diagnostics).into(),
        };
        io::write_json(path, &json)?;
    }
    if !fit.diagnostics.converged {
        return Err(CliError::NonConvergence(format!("forecast tuning stopped after {} iterations", fit.diagnostics.iterations)));
    }
    Ok(())
}

pub const DEFAULT_K: f64 = DEFAULT_FORECAST_K;

/// Runs the Monte Carlo comparison for every size in `sizes` and writes the
/// risk table.
pub fn cmd_simulate(scenario: &str, sizes: &str, reps: usize, out: &Path, run: &RunOptions) -> Result<(), CliError> {
    let kind = ScenarioKind::parse(scenario).ok_or_else(|| {
        let names: Vec<&str> = ScenarioKind::ALL.iter().map(|k| k.name()).collect();
        CliError::Input(format!("unknown scenario `{scenario}` (expected one of {})", names.join(", ")))
    })?;
    let sizes = parse_j_range(sizes)?;
    if reps == 0 {
        return Err(CliError::Input("reps must be positive".into()));
    }
    let mut config = SimConfig::for_scenario(kind);
    config.deterministic = run.deterministic;
    config.optimizer.seed = run.seed;
    if let Some(m) = run.max_iters {
        config.optimizer.max_iters = m;
    }
    let table = run_grid(kind, &sizes, reps, run.seed, &config)?;
    std::fs::write(out, table.to_csv()).map_err(|e| CliError::Output(format!("{}: {e}", out.display())))
}
