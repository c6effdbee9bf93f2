mod analyze;
mod output;
mod run;
mod sim;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fractal_sgd::Error;

pub const EXIT_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_TELEMETRY: u8 = 5;

/// A command failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. }
            | Error::InvalidInput(_)
            | Error::InvalidArchitecture(_)
            | Error::HypothesisViolated(_) => EXIT_CONFIG,
            Error::Data(_) => EXIT_DATA,
            Error::NumericalOverflow(_) | Error::MassDrift { .. } => EXIT_DIVERGED,
            Error::InsufficientData(_) => EXIT_TELEMETRY,
            _ => EXIT_FAILED,
        };
        Failure::new(code, e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "fractal-sgd", version, about = "SGD diffusion experiments, LLC estimation and fractional Fokker-Planck tools")]
struct Cli {
    /// Worker threads for parallel runs, chains and walkers (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Experiment config (TOML), or a manifest.json to re-run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: runs/<command>-<run id>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and log its trajectory.
    Train(Common),
    /// Train every seed (and architecture) of the configured ensemble.
    Ensemble {
        #[command(flatten)]
        common: Common,
        /// Seeds per architecture; overrides `ensemble.runs`.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Fit displacement laws and dimension inequalities for a run or ensemble directory.
    Analyze {
        /// Directory written by `train` or `ensemble`.
        dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate a local learning coefficient (toy potential or checkpoint).
    Llc {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to estimate at, using the config's data and model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Solve the time-fractional Fokker-Planck equation for each configured order.
    Ffpe(Common),
    /// Measure mass, walker and spectral dimensions of a substrate.
    Bench(Common),
    /// Run the numerical oracle suite.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated check groups to run.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Reduced instance sizes.
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fault {
    FlipDrift,
}

fn dispatch(cli: Cli) -> CliResult {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(EXIT_CONFIG, format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Train(c) => run::train(&c),
        Command::Ensemble { common, runs } => run::ensemble(&common, runs),
        Command::Analyze { dir, common } => analyze::analyze(&dir, &common),
        Command::Llc { common, checkpoint } => sim::llc(&common, checkpoint.as_deref()),
        Command::Ffpe(c) => sim::ffpe(&c),
        Command::Bench(c) => sim::bench(&c),
        Command::Validate {
            common,
            only,
            quick,
            inject_fault,
        } => sim::validate(&common, only, quick, matches!(inject_fault, Some(Fault::FlipDrift))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
