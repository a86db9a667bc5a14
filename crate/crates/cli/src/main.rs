//! `mglmm`: batch front end for conditional-inference mixed model fits,
//! simulation studies and asymptotic variance summaries.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mglmm::{Method, StudyMethod};

#[derive(Parser, Debug)]
#[command(name = "mglmm", version, about = "Conditional inference for multivariate generalised linear mixed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a data file.
    Fit(FitArgs),
    /// Draw datasets from a simulation configuration.
    Simulate(SimulateArgs),
    /// Run a simulation study.
    Study(StudyArgs),
    /// Sandwich and unconditional variances at a fitted model.
    Asymptotics(AsymptoticsArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; 1 gives the reference schedule.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct Solver {
    /// Outer convergence tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Maximum number of outer iterations.
    #[arg(long = "max-iter")]
    pub max_iter: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum FitMethod {
    Condinf,
    Laplace,
}

impl From<FitMethod> for Method {
    fn from(m: FitMethod) -> Self {
        match m {
            FitMethod::Condinf => Method::Condinf,
            FitMethod::Laplace => Method::Laplace,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum StudyMethodArg {
    Condinf,
    Laplace,
    Quadrature,
}

impl From<StudyMethodArg> for StudyMethod {
    fn from(m: StudyMethodArg) -> Self {
        match m {
            StudyMethodArg::Condinf => StudyMethod::Condinf,
            StudyMethodArg::Laplace => StudyMethod::Laplace,
            StudyMethodArg::Quadrature => StudyMethod::Quadrature,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq, Eq)]
pub enum ModeArg {
    Empirical,
    ModelBased,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// Model configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Data file (CSV with header).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "condinf")]
    pub method: FitMethod,
    /// Accepted for a uniform interface; fitting draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub solver: Solver,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    /// Simulation configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Multiplier of the base covariance.
    #[arg(long, default_value_t = 1.0)]
    pub constant: f64,
    /// Number of clusters; defaults to the configuration's `q`.
    #[arg(long)]
    pub q: Option<usize>,
    /// Number of datasets; defaults to 1.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct StudyArgs {
    /// Study configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Methods to compare, comma separated; overrides the configuration.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub method: Vec<StudyMethodArg>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct AsymptoticsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "empirical")]
    pub mode: ModeArg,
    /// Monte Carlo draws for the unconditional variances; 0 skips them.
    #[arg(long, default_value_t = 0)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: Solver,
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage problems are input errors; exit 2 is reserved for non-convergence.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let start = Instant::now();
    let (name, common) = match &cli.command {
        Command::Fit(a) => ("fit", &a.common),
        Command::Simulate(a) => ("simulate", &a.common),
        Command::Study(a) => ("study", &a.common),
        Command::Asymptotics(a) => ("asymptotics", &a.common),
    };
    let threads = common.threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if threads == 0 {
        eprintln!("mglmm {name}: --threads must be positive");
        return ExitCode::from(1);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("mglmm {name}: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    let code = pool.install(|| match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Study(a) => commands::study(a),
        Command::Asymptotics(a) => commands::asymptotics(a),
    });
    eprintln!("mglmm {name}: exit {code} after {:.3} s on {threads} thread(s)", start.elapsed().as_secs_f64());
    ExitCode::from(code)
}
