use clap::{Parser, Subcommand};
use panelshrink_cli::{cmd_fit, cmd_forecast, cmd_preprocess, cmd_simulate, CliError, FitArgs, RunOptions, DEFAULT_K};
use std::path::PathBuf;
use std::process::ExitCode;

/// Shrinkage estimation of panel fixed effects.
#[derive(Parser, Debug)]
#[command(name = "panelshrink", version)]
struct Cli {
    /// Sequential restarts and replications for reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Use closed-form gradients instead of finite differences.
    #[arg(long, global = true)]
    analytic_gradient: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate cell fixed effects from a panel CSV and write a problem JSON.
    Preprocess {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Subtract the cross-sectional mean of each period.
        #[arg(long)]
        demean: bool,
    },
    /// Fit a shrinkage estimator to a problem JSON.
    Fit {
        problem: PathBuf,
        /// ure-m, ure-g, ure-cov, ebmle or mle.
        #[arg(long, default_value = "ure-g")]
        estimator: String,
        /// full, diag, toeplitz, scalar or rank1.
        #[arg(long, default_value = "full")]
        structure: String,
        /// CSV with a T x T weight matrix or R x T combination rows.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        /// Scale of the covariate coefficient ball.
        #[arg(long = "B", default_value_t = 1e3)]
        ball_scale: f64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Tune Λ for one-step-ahead prediction and forecast period T+1.
    Forecast {
        problem: PathBuf,
        #[arg(long = "K", default_value_t = DEFAULT_K)]
        k: f64,
        #[arg(long, default_value = "full")]
        structure: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fit_out: Option<PathBuf>,
    },
    /// Monte Carlo risk comparison on a simulated design.
    Simulate {
        #[arg(long)]
        scenario: String,
        /// Unit counts as start:end:step, a list, or one value.
        #[arg(long = "J", default_value = "100:1000:100")]
        sizes: String,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    let opts = RunOptions {
        deterministic: cli.deterministic,
        seed: cli.seed,
        max_iters: cli.max_iters,
        analytic_gradient: cli.analytic_gradient,
    };
    match cli.command {
        Command::Preprocess { input, out, report, demean } => cmd_preprocess(&input, &out, report.as_deref(), demean),
        Command::Fit { problem, estimator, structure, weights, tau, ball_scale, out_dir } => {
            let args = FitArgs { problem, estimator, structure, weights, tau, ball_scale, out_dir };
            cmd_fit(&args, &opts)
        }
        Command::Forecast { problem, k, structure, out, fit_out } => {
            cmd_forecast(&problem, k, &structure, &out, fit_out.as_deref(), &opts)
        }
        Command::Simulate { scenario, sizes, reps, out } => cmd_simulate(&scenario, &sizes, reps, &out, &opts),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
