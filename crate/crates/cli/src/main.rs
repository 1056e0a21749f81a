//! `delay-mimo`: offline solve, power calibration, simulation, sweeps and a
//! self-check suite for delay-optimal MIMO precoding.

mod commands;
mod config;
mod sweep;
mod verify;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use delay_mimo::{Error, SolverMode};

use crate::config::{Overrides, RunConfig, CACHE_DIR_ENV};

/// Invalid input: bad flags, unreadable or inconsistent configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// At least one self-check failed.
#[derive(Debug)]
pub struct VerifyFailure(pub usize);

impl fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} verification check(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailure {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Full,
    Decomposed,
}

impl From<ModeArg> for SolverMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => SolverMode::Full,
            ModeArg::Decomposed => SolverMode::Decomposed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum PolicyArg {
    Full,
    Decomposed,
    Rr,
    Csit,
}

impl PolicyArg {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Decomposed => "decomposed",
            Self::Rr => "rr",
            Self::Csit => "csit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    P0,
    SigmaE2,
    Antennas,
}

#[derive(Parser, Debug)]
#[command(name = "delay-mimo", version = config::VERSION, about)]
struct Cli {
    /// TOML or JSON run configuration; defaults to the built-in scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fixed power price γ.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Average power budget in dB relative to unit noise power.
    #[arg(long = "p0", global = true, allow_negative_numbers = true)]
    p0: Option<f64>,
    /// Solver for solve, calibrate and the default simulate policy.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Policies to simulate, comma separated.
    #[arg(long, global = true, value_enum, value_delimiter = ',')]
    policy: Vec<PolicyArg>,
    /// Slots per simulated replication.
    #[arg(long, global = true)]
    slots: Option<u64>,
    /// Simulation seeds, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// CSIT error variance σ_e².
    #[arg(long = "sigma-e2", global = true)]
    sigma_e2: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding reusable eigenvalue caches.
    #[arg(long, global = true, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve the MDP and write the solution file with a summary.
    Solve,
    /// Find the power price meeting the power budget.
    Calibrate,
    /// Simulate policies slot by slot.
    Simulate,
    /// Calibrate, solve, analyze and simulate over a parameter grid.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Grid values: dB for p0, variances for sigma-e2, `TxR` for antennas.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Run the cross-module self-checks.
    Verify {
        /// Perturb one marginal value of the full solution.
        #[arg(long)]
        inject_fault: bool,
        /// Rows of the eigenvalue cache used by the checks.
        #[arg(long, default_value_t = verify::DEFAULT_CACHE_ROWS)]
        cache_rows: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerifyFailure>() {
            return 3;
        }
        if cause.is::<ConfigError>() || cause.is::<std::io::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Domain(_) | Error::Parse(_) | Error::StateCap { .. } | Error::Io(_) => 1,
                Error::Numeric(_) | Error::Range { .. } | Error::Json(_) => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        gamma: cli.gamma,
        p0_db: cli.p0,
        mode: cli.mode.map(Into::into),
        slots: cli.slots,
        seeds: cli.seeds.clone(),
        sigma_e2: cli.sigma_e2,
        out: cli.out.clone(),
    };
    match cli.cmd {
        Cmd::Verify {
            inject_fault,
            cache_rows,
        } => {
            let out = cli.out.clone();
            verify::run(&verify::VerifyOptions {
                inject_fault,
                cache_rows,
                slots: cli.slots.unwrap_or(verify::DEFAULT_SLOTS),
                seed: cli.seeds.as_ref().and_then(|s| s.first().copied()).unwrap_or(1),
                out,
            })
        }
        cmd => {
            let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
            let ctx = commands::Session::new(cfg, cli.cache_dir.clone())?;
            match cmd {
                Cmd::Solve => commands::solve(&ctx),
                Cmd::Calibrate => commands::calibrate(&ctx),
                Cmd::Simulate => commands::simulate(&ctx, &cli.policy),
                Cmd::Sweep { axis, values } => sweep::run(&ctx, axis, &values, &cli.policy),
                Cmd::Verify { .. } => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are configuration errors; --help and --version are not
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
