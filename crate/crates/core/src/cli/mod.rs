//! Batch driver: `parorb run <config.toml>`.

mod config;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{parse_config, ConfigError, IoConfig, ProblemConfig, RunConfig};
pub use run::{
    log_row, reduction_rows, run, thin_records, write_log, write_reduction, ConvergenceInfo, ExitStatus,
    FailureSummary, LevelSummary, OracleSummary, RunError, RunOptions, RunOutcome, RunSummary, LOG_HEADER, VERSION,
};

#[derive(Debug, Parser)]
#[command(name = "parorb", version, about = "Orbital minimization on a real-space grid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the problem described by a TOML config file.
    Run {
        config: PathBuf,
        /// Worker threads (overrides the config).
        #[arg(long)]
        threads: Option<usize>,
        /// Seed for the starting orbitals (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Write every k-th iteration row (overrides the config).
        #[arg(long)]
        log_every: Option<usize>,
        /// Also write `(iter, E - E_final)` for the orthonormal iterates.
        #[arg(long)]
        emit_reduction: bool,
        /// Add a KS residual and, for small linear problems, a dense
        /// eigensolver comparison to the summary.
        #[arg(long)]
        oracle_check: bool,
    },
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitStatus::Config.code() } else { 0 };
        }
    };
    let Command::Run { config, threads, seed, log_every, emit_reduction, oracle_check } = cli.command;
    let mut cfg = match parse_config(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return RunError::from(e).status().code();
        }
    };
    if threads.is_some() {
        cfg.threads = threads;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(k) = log_every {
        cfg.io.log_every = k;
    }
    match run(&cfg, RunOptions { emit_reduction, oracle_check }) {
        Ok(outcome) => {
            match &outcome.summary {
                Some(s) => println!(
                    "{}: E = {:.12e} after {} iterations, |grad| = {:.3e}, KS residual = {:.3e}",
                    s.status, s.energy.total, s.iterations, s.grad_norm, s.ks_residual
                ),
                None => eprintln!("solve failed; see {}", cfg.io.summary.display()),
            }
            outcome.status.code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.status().code()
        }
    }
}
