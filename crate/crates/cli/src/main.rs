//! `qsd`: quasi-stationary analysis of absorbed chains from the command line.
//!
//! Every command prints one JSON report on stdout. Exit status is 0 when all
//! executed checks pass, 2 when a check fails and 1 on unusable input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qsd_core::commands::{chain_report, lab_report, lyapunov_report, Depth};
use qsd_core::io::InputError;
use qsd_core::oracle::{Status, VerifyOptions};
use qsd_core::report::Report;

#[derive(Parser)]
#[command(name = "qsd", version, about = "Quasi-stationary analysis of absorbed Markov chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Communication classes, their rates and the leading-rate strata.
    Analyze { path: PathBuf },
    /// Full certificate: rate, exponents, extreme laws and eigenfunctions.
    Qsd { path: PathBuf },
    /// Certificate checked against brute-force iteration and Monte Carlo.
    Verify {
        path: PathBuf,
        /// Horizon of the iteration checks.
        #[arg(long, default_value_t = 4000)]
        n: usize,
        /// Monte Carlo trajectories; 0 skips the simulation.
        #[arg(long, default_value_t = 0)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Random block-triangular operators checked against the composition rules.
    OperatorLab {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
        case: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Largest power used to fit the limit operators.
        #[arg(long, default_value_t = 400)]
        n_max: usize,
    },
    /// Lyapunov drift and truncation stability of a rule-defined chain.
    Lyapunov {
        rules: PathBuf,
        /// Weight expression; overrides a `V =` line in the rule file.
        #[arg(long = "V")]
        v: Option<String>,
        /// Truncation sizes, comma separated.
        #[arg(long = "N", value_delimiter = ',', default_values_t = [100, 200, 400])]
        n: Vec<usize>,
    },
}

fn read(path: &Path) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    String::from_utf8(bytes).map_err(|_| format!("{}: not valid UTF-8", path.display()))
}

fn with_path(path: &Path, e: InputError) -> String {
    format!("{}: {e}", path.display())
}

fn run(cli: Cli) -> Result<Report, String> {
    match cli.command {
        Command::Analyze { path } => {
            chain_report(&read(&path)?, Depth::Classes, VerifyOptions::default()).map_err(|e| with_path(&path, e))
        }
        Command::Qsd { path } => {
            chain_report(&read(&path)?, Depth::Certificate, VerifyOptions::default()).map_err(|e| with_path(&path, e))
        }
        Command::Verify { path, n, samples, seed } => {
            let opts = VerifyOptions { n_max: n, samples, seed, ..VerifyOptions::default() };
            chain_report(&read(&path)?, Depth::Verification, opts).map_err(|e| with_path(&path, e))
        }
        Command::OperatorLab { case, seed, instances, n_max } => {
            lab_report(case, seed, instances, n_max).map_err(|e| e.to_string())
        }
        Command::Lyapunov { rules, v, n } => {
            lyapunov_report(&read(&rules)?, v.as_deref(), &n).map_err(|e| with_path(&rules, e))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(rep) => {
            print!("{}", rep.to_json());
            if rep.status() == Status::Fail {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
