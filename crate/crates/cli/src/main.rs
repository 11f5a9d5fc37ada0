//! Command line driver: simulate data from the built-in models, run the
//! posterior inference pipeline, produce predictive bands, and summarize
//! sample files. Exit codes: 0 success, 2 configuration error, 3 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod artifacts;
mod commands;
mod config;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "odelap",
    about = "Posterior inference for ODE regression models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in model: cooling | fhn | predator-prey | logistic.
    #[arg(long)]
    model: Option<String>,
    /// Output directory (default: current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed (required for anything that draws).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate noisy observations from a built-in model.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of observations (with --h).
        #[arg(long)]
        n: Option<usize>,
        /// Observation spacing (with --n).
        #[arg(long)]
        h: Option<f64>,
        /// First observation time (default 0).
        #[arg(long)]
        t1: Option<f64>,
        /// Generating parameter, comma-separated.
        #[arg(long)]
        theta: Option<String>,
        /// Generating initial state, comma-separated.
        #[arg(long)]
        x1: Option<String>,
        /// Observation noise variance.
        #[arg(long)]
        sigma2: Option<f64>,
        /// Sub-steps for the reference trajectory (default 100).
        #[arg(long)]
        m_fine: Option<usize>,
        /// Fold observations to absolute values.
        #[arg(long)]
        positivity: Option<bool>,
    },
    /// Run posterior inference on a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Observations CSV (t,y1,...,yp).
        #[arg(long)]
        data: Option<PathBuf>,
        /// One-step method: euler | rk4 (default rk4).
        #[arg(long)]
        solver: Option<String>,
        /// Fixed sub-step count (default 1).
        #[arg(long)]
        m: Option<usize>,
        /// Increasing m sequence for automatic refinement (grid sampler).
        #[arg(long)]
        m_sequence: Option<String>,
        /// Relative stopping tolerance for refinement (default 0.001).
        #[arg(long)]
        m_rel_tol: Option<f64>,
        /// Sampler: grid | griddy (default: grid for q <= 4, griddy above).
        #[arg(long)]
        sampler: Option<String>,
        /// Coarse half-intervals per axis (default 5).
        #[arg(long)]
        m1: Option<usize>,
        /// Fine half-intervals per axis (default 25).
        #[arg(long)]
        m2: Option<usize>,
        /// Range-finding mass threshold (default 1e-5).
        #[arg(long)]
        eta: Option<f64>,
        /// Posterior draws (default 10000).
        #[arg(long)]
        n_draws: Option<usize>,
        /// Griddy thinning (default 5).
        #[arg(long)]
        thin: Option<usize>,
        /// Griddy points per axis (default 31).
        #[arg(long)]
        axis_points: Option<usize>,
        /// Gamma shape for tau2.
        #[arg(long)]
        a: Option<f64>,
        /// Gamma rate for tau2.
        #[arg(long)]
        b: Option<f64>,
        /// Initial-state prior scale.
        #[arg(long)]
        c: Option<f64>,
        /// Initial-state prior mean: "first-observation" or components.
        #[arg(long)]
        mu_x1: Option<String>,
        /// Grid center (default: the model's reference center).
        #[arg(long)]
        theta0: Option<String>,
    },
    /// Posterior-predictive trajectory bands from a samples file.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Observations CSV the samples were fitted to.
        #[arg(long)]
        data: Option<PathBuf>,
        /// samples.csv from a previous infer run.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// One-step method (default rk4).
        #[arg(long)]
        solver: Option<String>,
        /// Sub-step count (default 1).
        #[arg(long)]
        m: Option<usize>,
        /// Future points beyond the data (default 10).
        #[arg(long)]
        horizon: Option<usize>,
        /// Also emit observation-noise (predictive) bands.
        #[arg(long)]
        predictive: Option<bool>,
        /// Gamma shape for tau2.
        #[arg(long)]
        a: Option<f64>,
        /// Gamma rate for tau2.
        #[arg(long)]
        b: Option<f64>,
        /// Initial-state prior scale.
        #[arg(long)]
        c: Option<f64>,
        /// Initial-state prior mean.
        #[arg(long)]
        mu_x1: Option<String>,
    },
    /// Recompute summary.csv from a samples file.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// samples.csv to summarize.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            common,
            n,
            h,
            t1,
            theta,
            x1,
            sigma2,
            m_fine,
            positivity,
        } => {
            let cfg = config::merged(
                common.config.as_deref(),
                vec![
                    ("model", common.model),
                    ("out", path_str(&common.out)),
                    ("seed", common.seed.map(|v| v.to_string())),
                    ("n", n.map(|v| v.to_string())),
                    ("h", h.map(|v| v.to_string())),
                    ("t1", t1.map(|v| v.to_string())),
                    ("theta", theta),
                    ("x1", x1),
                    ("sigma2", sigma2.map(|v| v.to_string())),
                    ("m_fine", m_fine.map(|v| v.to_string())),
                    ("positivity", positivity.map(|v| v.to_string())),
                ],
            )?;
            commands::simulate(&cfg)
        }
        Command::Infer {
            common,
            data,
            solver,
            m,
            m_sequence,
            m_rel_tol,
            sampler,
            m1,
            m2,
            eta,
            n_draws,
            thin,
            axis_points,
            a,
            b,
            c,
            mu_x1,
            theta0,
        } => {
            let cfg = config::merged(
                common.config.as_deref(),
                vec![
                    ("model", common.model),
                    ("out", path_str(&common.out)),
                    ("seed", common.seed.map(|v| v.to_string())),
                    ("data", path_str(&data)),
                    ("solver", solver),
                    ("m", m.map(|v| v.to_string())),
                    ("m_sequence", m_sequence),
                    ("m_rel_tol", m_rel_tol.map(|v| v.to_string())),
                    ("sampler", sampler),
                    ("m1", m1.map(|v| v.to_string())),
                    ("m2", m2.map(|v| v.to_string())),
                    ("eta", eta.map(|v| v.to_string())),
                    ("n_draws", n_draws.map(|v| v.to_string())),
                    ("thin", thin.map(|v| v.to_string())),
                    ("axis_points", axis_points.map(|v| v.to_string())),
                    ("a", a.map(|v| v.to_string())),
                    ("b", b.map(|v| v.to_string())),
                    ("c", c.map(|v| v.to_string())),
                    ("mu_x1", mu_x1),
                    ("theta0", theta0),
                ],
            )?;
            commands::infer(&cfg)
        }
        Command::Predict {
            common,
            data,
            samples,
            solver,
            m,
            horizon,
            predictive,
            a,
            b,
            c,
            mu_x1,
        } => {
            let cfg = config::merged(
                common.config.as_deref(),
                vec![
                    ("model", common.model),
                    ("out", path_str(&common.out)),
                    ("seed", common.seed.map(|v| v.to_string())),
                    ("data", path_str(&data)),
                    ("samples", path_str(&samples)),
                    ("solver", solver),
                    ("m", m.map(|v| v.to_string())),
                    ("horizon", horizon.map(|v| v.to_string())),
                    ("predictive", predictive.map(|v| v.to_string())),
                    ("a", a.map(|v| v.to_string())),
                    ("b", b.map(|v| v.to_string())),
                    ("c", c.map(|v| v.to_string())),
                    ("mu_x1", mu_x1),
                ],
            )?;
            commands::predict(&cfg)
        }
        Command::Summarize { common, samples } => {
            let cfg = config::merged(
                common.config.as_deref(),
                vec![
                    ("out", path_str(&common.out)),
                    ("samples", path_str(&samples)),
                ],
            )?;
            commands::summarize(&cfg)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("odelap: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Numerical(_) => ExitCode::from(3),
            }
        }
    }
}
