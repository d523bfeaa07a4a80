//! Orbital minimization on the Stiefel manifold: OptM-QR, the per-orbital
//! parallel variant and its periodically orthonormalized modification.

mod convergence;
mod inner;
mod linesearch;
mod outer;
mod params;
mod timing;

use thiserror::Error;

pub use convergence::{check_convergence, mean_recent_change, relative_change, Metrics};
pub use inner::{run_inner, InnerOutcome, IterationRecord, DRIFT_THRESHOLD};
pub use linesearch::{
    bb_step, bb_traces, initial_step, nonmonotone_search, BbTraces, NonmonotoneState, SearchError, SearchOutcome,
};
pub use outer::{initialize_orbitals, solve, solve_from, solve_observed, LevelReport, SolveFailure, SolveReport};
pub use params::{Algorithm, BbVariant, ConvergenceMode, CurvatureTrace, OptimizerParams, ParamError, Period};
pub use timing::{Phase, PhaseClock};

use crate::energy::EnergyError;
use crate::grid::GridError;
use crate::manifold::ManifoldError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("line search stagnated at level {level}, iteration {iter}: {} trials above reference {reference:e}", trial_energies.len())]
    Stagnation { level: usize, iter: usize, trial_energies: Vec<f64>, reference: f64 },
    #[error("non-finite values at level {level}, iteration {iter}")]
    NonFinite { level: usize, iter: usize },
    #[error("cannot place {orbitals} orthonormal orbitals on {points} grid points")]
    TooManyOrbitals { orbitals: usize, points: usize },
    #[error("initial orbitals were degenerate in all {attempts} attempts")]
    Initialization { attempts: usize },
}
