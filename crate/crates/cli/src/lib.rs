//! `hjbctl`: solve, simulate and verify stochastic control problems described
//! by a JSON file.
//!
//! Every run writes `manifest.json` into the output directory with the fully
//! resolved configuration and problem, and exits with a status that encodes
//! the outcome class:
//!
//! | status | meaning                                   |
//! |--------|-------------------------------------------|
//! | 0      | success, all requested checks passed      |
//! | 1      | a verification check failed               |
//! | 2      | command line or problem file did not parse |
//! | 3      | the problem violates an invariant         |
//! | 4      | numerical failure                         |
//! | 5      | file system error                         |

mod commands;
mod load;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hjb_core::{Problem, ValidationReport};
use serde::Serialize;

pub use load::{apply_override, load_problem};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECKS_FAILED: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "hjbctl",
    version,
    about = "Solve, simulate and verify stochastic optimal control problems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for the cost-to-go and extract the optimal policy
    Solve(CommonArgs),
    /// Roll out the optimal policy from x0
    Simulate(CommonArgs),
    /// Estimate the moments of a single noise increment
    Moments(MomentArgs),
    /// Run the oracle, action-identity and Bellman checks
    Verify(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Problem description (JSON)
    #[arg(short, long)]
    problem: PathBuf,
    /// Directory receiving every output file
    #[arg(short, long, default_value = ".")]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    n_paths: usize,
    /// Initial state, comma-separated (default: grid centre)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// Also write every simulated path to paths.csv
    #[arg(long)]
    dump_paths: bool,
    /// Override a problem entry by dotted path, e.g. `noise.sigma=[0.5]`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for Monte Carlo and grid sweeps (results do not depend on it)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct MomentArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Control held during the increment, comma-separated (default: zero)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    u: Option<Vec<f64>>,
    /// Increment length (default: the horizon step)
    #[arg(long, allow_hyphen_values = true)]
    dtau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Solve,
    Simulate,
    Moments,
    Verify,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub problem_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub n_paths: usize,
    pub x0: Option<Vec<f64>>,
    pub dump_paths: bool,
    pub overrides: Vec<String>,
    pub workers: Option<usize>,
    pub u: Option<Vec<f64>>,
    pub dtau: Option<f64>,
}

impl RunConfig {
    fn from_common(command: CommandKind, a: CommonArgs) -> Self {
        Self {
            command,
            problem_path: a.problem,
            output_dir: a.output,
            seed: a.seed,
            n_paths: a.n_paths,
            x0: a.x0,
            dump_paths: a.dump_paths,
            overrides: a.overrides,
            workers: a.workers,
            u: None,
            dtau: None,
        }
    }
}

/// Why a run did not succeed.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid problem: {0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Numeric(hjb_core::Error),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Parse { .. } => EXIT_PARSE,
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Numeric(_) => EXIT_NUMERIC,
            Failure::Io { .. } => EXIT_IO,
        }
    }
}

impl From<hjb_core::Error> for Failure {
    fn from(e: hjb_core::Error) -> Self {
        match e {
            hjb_core::Error::Invalid(report) => Failure::Invalid(report),
            hjb_core::Error::Io(_) | hjb_core::Error::Json(_) => Failure::Io {
                path: String::new(),
                message: e.to_string(),
            },
            other => Failure::Numeric(other),
        }
    }
}

/// Result of a run that got as far as executing its command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    ChecksFailed,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    problem: Option<&'a Problem>,
    exit_status: i32,
    error: Option<String>,
}

/// Parses command-line arguments (including the program name).
pub fn parse_args<I, T>(args: I) -> Result<RunConfig, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    Ok(match cli.command {
        Command::Solve(a) => RunConfig::from_common(CommandKind::Solve, a),
        Command::Simulate(a) => RunConfig::from_common(CommandKind::Simulate, a),
        Command::Verify(a) => RunConfig::from_common(CommandKind::Verify, a),
        Command::Moments(m) => RunConfig {
            u: m.u,
            dtau: m.dtau,
            ..RunConfig::from_common(CommandKind::Moments, m.common)
        },
    })
}

/// Parses `args` and executes the run; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_args(args) {
        Ok(cfg) => execute(&cfg),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_PARSE
            } else {
                EXIT_OK
            }
        }
    }
}

/// Executes one configured run, writing its outputs and manifest.
pub fn execute(cfg: &RunConfig) -> i32 {
    let mut resolved = cfg.clone();
    let mut problem = None;
    let result = commands::dispatch(&mut resolved, &mut problem);
    let (mut status, error) = match &result {
        Ok(Outcome::Done) => (EXIT_OK, None),
        Ok(Outcome::ChecksFailed) => (EXIT_CHECKS_FAILED, Some("verification checks failed".into())),
        Err(f) => (f.exit_code(), Some(f.to_string())),
    };
    if let Err(f) = &result {
        eprintln!("hjbctl: {f}");
        if let Failure::Invalid(report) = f {
            if let Ok(json) = serde_json::to_string_pretty(report) {
                eprintln!("{json}");
            }
        }
    }
    let manifest = Manifest {
        tool: "hjbctl",
        version: env!("CARGO_PKG_VERSION"),
        config: &resolved,
        problem: problem.as_ref(),
        exit_status: status,
        error,
    };
    let path = resolved.output_dir.join("manifest.json");
    let written = std::fs::create_dir_all(&resolved.output_dir)
        .map_err(hjb_core::Error::from)
        .and_then(|_| hjb_core::io::write_json_file(&path, &manifest));
    if let Err(e) = written {
        eprintln!("hjbctl: {}: {e}", path.display());
        if status == EXIT_OK || status == EXIT_CHECKS_FAILED {
            status = EXIT_IO;
        }
    }
    status
}
