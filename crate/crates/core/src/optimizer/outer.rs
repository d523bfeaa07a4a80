//! Grid levels and starting orbitals.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::inner::{charge_to_last, run_inner, IterationRecord};
use super::params::OptimizerParams;
use super::timing::{Phase, PhaseClock};
use super::OptimizerError;
use crate::energy::{AtomList, EnergyBreakdown, Problem};
use crate::grid::{prolongate, Field, Grid};
use crate::manifold::{orthonormalize, ManifoldError, OrbitalSet};

const INIT_ATTEMPTS: u64 = 5;
const INIT_NOISE: f64 = 1e-2;

/// Gaussian bumps cycling through the atoms (the box centre if there are
/// none), seeded random widths in `[0.5, 2]` and centre offsets in
/// `[-0.5, 0.5]` per axis, plus uniform noise of amplitude 1e-2, then
/// orthonormalized. A degenerate draw is retried with the next seed.
pub fn initialize_orbitals(
    grid: &Arc<Grid>,
    atoms: &AtomList,
    n: usize,
    seed: u64,
) -> Result<OrbitalSet, OptimizerError> {
    if n == 0 || n > grid.len() {
        return Err(OptimizerError::TooManyOrbitals { orbitals: n, points: grid.len() });
    }
    let centre: Vec<f64> = grid.extents().iter().map(|l| 0.5 * l).collect();
    for attempt in 0..INIT_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut fields = Vec::with_capacity(n);
        for i in 0..n {
            let anchor = match atoms.entries() {
                [] => centre.as_slice(),
                list => list[i % list.len()].position.as_slice(),
            };
            let c: Vec<f64> = anchor.iter().map(|x| x + rng.gen_range(-0.5..0.5)).collect();
            let width: f64 = rng.gen_range(0.5..2.0);
            let inv = 1.0 / (2.0 * width * width);
            let mut f = Field::from_fn(grid, |x| {
                let r2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                (-r2 * inv).exp()
            });
            for v in f.values_mut() {
                *v += INIT_NOISE * rng.gen_range(-1.0..1.0);
            }
            fields.push(f);
        }
        match orthonormalize(&OrbitalSet::new(fields)?) {
            Ok(u) => return Ok(u),
            Err(ManifoldError::Degenerate { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(OptimizerError::Initialization { attempts: INIT_ATTEMPTS as usize })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub level: usize,
    pub points_per_axis: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub orbitals: OrbitalSet,
    /// Problem on the finest grid.
    pub problem: Problem,
    pub energy: EnergyBreakdown,
    pub records: Vec<IterationRecord>,
    /// Convergence of the final level.
    pub converged: bool,
    /// Steps summed over all levels.
    pub iterations: usize,
    pub grad_norm: f64,
    pub levels: Vec<LevelReport>,
    pub wall_ms: f64,
    pub par_ms: f64,
}

impl SolveReport {
    pub fn parallel_fraction(&self) -> f64 {
        if self.wall_ms > 0.0 {
            (self.par_ms / self.wall_ms).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// A failed solve together with the log written before the failure.
#[derive(Debug, Clone)]
pub struct SolveFailure {
    pub error: OptimizerError,
    pub records: Vec<IterationRecord>,
}

impl std::fmt::Display for SolveFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} logged iterations)", self.error, self.records.len())
    }
}

impl std::error::Error for SolveFailure {}

/// Seeds `n` orbitals on the problem's grid and runs [`solve_from`].
pub fn solve(problem: &Problem, n: usize, params: &OptimizerParams) -> Result<SolveReport, SolveFailure> {
    let u0 = initialize_orbitals(problem.grid(), problem.atoms(), n, params.seed)
        .map_err(|error| SolveFailure { error, records: Vec::new() })?;
    solve_from(u0, problem, params)
}

/// [`solve_from`] that also hands every logged row and its iterate `W^(l)`
/// to `observe`. Time spent in `observe` is left out of the timings.
pub fn solve_observed(
    u0: OrbitalSet,
    problem: &Problem,
    params: &OptimizerParams,
    observe: &mut dyn FnMut(&IterationRecord, &OrbitalSet),
) -> Result<SolveReport, SolveFailure> {
    let mut records = Vec::new();
    match solve_levels(u0, problem, params, &mut records, observe) {
        Ok(report) => Ok(SolveReport { records, ..report }),
        Err(error) => Err(SolveFailure { error, records }),
    }
}

/// Runs the inner solver on `params.outer_levels` grids, starting from the
/// problem's grid and refining uniformly. Each finer level starts from the
/// prolongated, re-orthonormalized result of the previous one, with fresh
/// BB history and nonmonotone state.
pub fn solve_from(u0: OrbitalSet, problem: &Problem, params: &OptimizerParams) -> Result<SolveReport, SolveFailure> {
    solve_observed(u0, problem, params, &mut |_, _| {})
}

fn solve_levels(
    u0: OrbitalSet,
    problem: &Problem,
    params: &OptimizerParams,
    records: &mut Vec<IterationRecord>,
    observe: &mut dyn FnMut(&IterationRecord, &OrbitalSet),
) -> Result<SolveReport, OptimizerError> {
    params.validate()?;
    if u0.len() > problem.grid().len() {
        return Err(OptimizerError::TooManyOrbitals { orbitals: u0.len(), points: problem.grid().len() });
    }
    let mut clock = PhaseClock::new();
    let mut problem = problem.clone();
    let mut u = orthonormalize(&u0)?;
    let mut levels = Vec::new();
    let mut iterations = 0;
    for level in 0..params.outer_levels {
        let out = run_inner(u, &problem, params, level, &mut clock, records, observe)?;
        iterations += out.iterations;
        levels.push(LevelReport {
            level,
            points_per_axis: problem.grid().points_per_axis().to_vec(),
            iterations: out.iterations,
            converged: out.converged,
        });
        if level + 1 == params.outer_levels {
            return Ok(SolveReport {
                orbitals: out.orbitals,
                problem,
                energy: out.energy,
                records: Vec::new(),
                converged: out.converged,
                iterations,
                grad_norm: out.grad_norm,
                levels,
                wall_ms: clock.total_ms(),
                par_ms: clock.parallel_ms(),
            });
        }
        let since = clock.snapshot();
        let fine = Arc::new(problem.grid().refine_uniform()?);
        let lifted = out
            .orbitals
            .orbitals()
            .iter()
            .map(|f| prolongate(f, &fine))
            .collect::<Result<Vec<_>, _>>()?;
        u = orthonormalize(&OrbitalSet::new(lifted)?)?;
        problem = problem.on_grid(fine)?;
        clock.lap(Phase::Sync);
        charge_to_last(records, since, &clock);
    }
    unreachable!("outer_levels is validated to be at least 1")
}
