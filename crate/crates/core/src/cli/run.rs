//! One solve driven by a [`RunConfig`], with its log and summary files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::config::{ConfigError, RunConfig};
use crate::energy::EnergyBreakdown;
use crate::optimizer::{solve, IterationRecord, LevelReport, OptimizerError, SolveReport};
use crate::oracle::{lowest_eigenvalue_sum, ks_residual, DENSE_LIMIT};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const LOG_HEADER: &str = "level,iter,energy,grad_norm,tau,backtracks,did_orth,did_diag,offdiag_max,wall_ms,par_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Converged = 0,
    Failed = 1,
    NotConverged = 2,
    Stagnation = 3,
    Config = 4,
    Io = 5,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    fn label(self) -> &'static str {
        match self {
            ExitStatus::Converged => "converged",
            ExitStatus::Failed => "error",
            ExitStatus::NotConverged => "not_converged",
            ExitStatus::Stagnation => "stagnation",
            ExitStatus::Config => "config_error",
            ExitStatus::Io => "io_error",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot start thread pool: {0}")]
    Pool(String),
}

impl RunError {
    pub fn status(&self) -> ExitStatus {
        match self {
            RunError::Config(ConfigError::Read { .. }) => ExitStatus::Io,
            RunError::Config(_) => ExitStatus::Config,
            RunError::Io { .. } => ExitStatus::Io,
            RunError::Pool(_) => ExitStatus::Failed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub emit_reduction: bool,
    pub oracle_check: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceInfo {
    pub mode: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSummary {
    pub level: usize,
    pub points_per_axis: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&LevelReport> for LevelSummary {
    fn from(l: &LevelReport) -> Self {
        LevelSummary {
            level: l.level,
            points_per_axis: l.points_per_axis.clone(),
            iterations: l.iterations,
            converged: l.converged,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub ks_residual: f64,
    /// Sum of the lowest `N` eigenvalues of the dense Hamiltonian; linear
    /// problems with at most 4096 points only.
    pub dense_eigenvalue_sum: Option<f64>,
    pub energy_minus_dense: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub version: String,
    pub status: String,
    pub converged: bool,
    pub energy: EnergyBreakdown,
    pub iterations: usize,
    pub grad_norm: f64,
    pub ks_residual: f64,
    pub wall_ms: f64,
    pub par_ms: f64,
    pub parallel_fraction: f64,
    pub convergence: ConvergenceInfo,
    pub levels: Vec<LevelSummary>,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSummary>,
}

/// Written instead of [`RunSummary`] when the solve aborts.
#[derive(Debug, Clone, Serialize)]
pub struct FailureSummary {
    pub version: String,
    pub status: String,
    pub error: String,
    pub logged_iterations: usize,
    pub config: RunConfig,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: ExitStatus,
    pub summary: Option<RunSummary>,
    pub records: Vec<IterationRecord>,
}

/// Runs the configured solve on a pool of `config.threads` workers and
/// writes the log, the summary and, if asked, the reduction file.
pub fn run(config: &RunConfig, options: RunOptions) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let problem = config.problem.build()?;
    let params = config.params();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = config.threads {
        pool = pool.num_threads(k);
    }
    let pool = pool.build().map_err(|e| RunError::Pool(e.to_string()))?;

    let result = pool.install(|| solve(&problem, config.problem.orbitals, &params));
    let (report, records) = match result {
        Ok(mut report) => {
            let records = std::mem::take(&mut report.records);
            (report, records)
        }
        Err(failure) => {
            let status = match failure.error {
                OptimizerError::Stagnation { .. } => ExitStatus::Stagnation,
                _ => ExitStatus::Failed,
            };
            write_log(&config.io.log, &failure.records, config.io.log_every)?;
            let summary = FailureSummary {
                version: VERSION.to_string(),
                status: status.label().to_string(),
                error: failure.error.to_string(),
                logged_iterations: failure.records.len(),
                config: config.clone(),
            };
            write_json(&config.io.summary, &summary)?;
            return Ok(RunOutcome { status, summary: None, records: failure.records });
        }
    };

    write_log(&config.io.log, &records, config.io.log_every)?;
    if options.emit_reduction {
        write_reduction(&config.io.reduction, &records, report.energy.total)?;
    }
    let status = if report.converged { ExitStatus::Converged } else { ExitStatus::NotConverged };
    let summary = pool.install(|| summarize(config, &report, status, options.oracle_check));
    write_json(&config.io.summary, &summary)?;
    Ok(RunOutcome { status, summary: Some(summary), records })
}

fn summarize(config: &RunConfig, report: &SolveReport, status: ExitStatus, oracle_check: bool) -> RunSummary {
    let residual = ks_residual(&report.orbitals, &report.problem).unwrap_or(f64::NAN);
    let oracle = oracle_check.then(|| {
        let dense = (report.problem.flags().is_linear() && report.problem.grid().len() <= DENSE_LIMIT)
            .then(|| lowest_eigenvalue_sum(&report.orbitals, &report.problem, report.orbitals.len()).ok())
            .flatten();
        OracleSummary {
            ks_residual: residual,
            dense_eigenvalue_sum: dense,
            energy_minus_dense: dense.map(|d| report.energy.total - d),
        }
    });
    RunSummary {
        version: VERSION.to_string(),
        status: status.label().to_string(),
        converged: report.converged,
        energy: report.energy,
        iterations: report.iterations,
        grad_norm: report.grad_norm,
        ks_residual: residual,
        wall_ms: report.wall_ms,
        par_ms: report.par_ms,
        parallel_fraction: report.parallel_fraction(),
        convergence: ConvergenceInfo {
            mode: config.optimizer.convergence_mode.to_string(),
            threshold: config.optimizer.threshold(),
        },
        levels: report.levels.iter().map(LevelSummary::from).collect(),
        config: config.clone(),
        oracle,
    }
}

fn float(x: f64) -> String {
    format!("{x:e}")
}

fn optional(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

/// One CSV line, without the trailing newline.
pub fn log_row(r: &IterationRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.level,
        r.iter,
        optional(r.energy),
        float(r.grad_norm),
        float(r.tau),
        r.backtracks,
        r.did_orth,
        r.did_diag,
        optional(r.offdiag_max),
        float(r.wall_ms),
        float(r.par_ms),
    )
}

/// Keeps every `every`-th row of each level plus the last one. Timings of
/// dropped rows are added to the next kept row.
pub fn thin_records(records: &[IterationRecord], every: usize) -> Vec<IterationRecord> {
    let mut kept = Vec::new();
    let (mut wall, mut par) = (0.0, 0.0);
    for (i, r) in records.iter().enumerate() {
        wall += r.wall_ms;
        par += r.par_ms;
        let last_of_level = records.get(i + 1).is_none_or(|n| n.level != r.level);
        if r.iter % every.max(1) == 0 || last_of_level {
            kept.push(IterationRecord { wall_ms: wall, par_ms: par, ..r.clone() });
            (wall, par) = (0.0, 0.0);
        }
    }
    kept
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    let io = |source| RunError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    File::create(path).map(BufWriter::new).map_err(io)
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<(), RunError> {
    let mut out = create(path)?;
    let io = |source| RunError::Io { path: path.to_path_buf(), source };
    for line in lines {
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_log(path: &Path, records: &[IterationRecord], every: usize) -> Result<(), RunError> {
    let rows = thin_records(records, every);
    write_lines(path, std::iter::once(LOG_HEADER.to_string()).chain(rows.iter().map(log_row)))
}

/// `(iter, E - E_final)` at the orthonormal iterates of the final level.
pub fn reduction_rows(records: &[IterationRecord], final_energy: f64) -> Vec<(usize, f64)> {
    let last_level = records.last().map_or(0, |r| r.level);
    records
        .iter()
        .filter(|r| r.level == last_level)
        .filter_map(|r| r.energy.map(|e| (r.iter, e - final_energy)))
        .collect()
}

pub fn write_reduction(path: &Path, records: &[IterationRecord], final_energy: f64) -> Result<(), RunError> {
    let rows = reduction_rows(records, final_energy);
    let lines = rows.iter().map(|(i, d)| format!("{i},{}", float(*d)));
    write_lines(path, std::iter::once("iter,energy_minus_min".to_string()).chain(lines))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut out = create(path)?;
    let io = |source| RunError::Io { path: path.to_path_buf(), source };
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| io(e.into()))?;
    writeln!(out).map_err(io)?;
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(level: usize, iter: usize, energy: Option<f64>) -> IterationRecord {
        IterationRecord {
            level,
            iter,
            energy,
            grad_norm: 0.5,
            tau: 1e-3,
            backtracks: 1,
            did_orth: energy.is_some(),
            did_diag: false,
            offdiag_max: energy.map(|_| 0.25),
            diag_dev: None,
            wall_ms: 1.0,
            par_ms: 0.5,
            c_before: None,
            acceptance_bound: None,
            c_after: None,
            weight_sum: None,
            drift: false,
            rollback: false,
        }
    }

    #[test]
    fn row_format() {
        assert_eq!(log_row(&record(0, 3, Some(-1.25))), "0,3,-1.25e0,5e-1,1e-3,1,true,false,2.5e-1,1e0,5e-1");
        assert_eq!(log_row(&record(1, 4, None)), "1,4,,5e-1,1e-3,1,false,false,,1e0,5e-1");
        assert_eq!(LOG_HEADER.split(',').count(), log_row(&record(0, 0, None)).split(',').count());
    }

    #[test]
    fn thinning_keeps_level_ends_and_preserves_time() {
        let rs: Vec<_> = (0..7).map(|i| record(0, i, None)).chain((0..3).map(|i| record(1, i, None))).collect();
        let kept = thin_records(&rs, 3);
        let ids: Vec<_> = kept.iter().map(|r| (r.level, r.iter)).collect();
        assert_eq!(ids, vec![(0, 0), (0, 3), (0, 6), (1, 0), (1, 2)]);
        assert_eq!(kept.iter().map(|r| r.wall_ms).sum::<f64>(), 10.0);
        assert_eq!(kept.iter().map(|r| r.par_ms).sum::<f64>(), 5.0);
        assert_eq!(thin_records(&rs, 1), rs);
    }

    #[test]
    fn reduction_uses_orthonormal_rows_of_the_last_level() {
        let rs = vec![
            record(0, 0, Some(5.0)),
            record(1, 0, Some(3.0)),
            record(1, 1, None),
            record(1, 2, Some(2.0)),
        ];
        assert_eq!(reduction_rows(&rs, 2.0), vec![(0, 1.0), (2, 0.0)]);
    }
}
