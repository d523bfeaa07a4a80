//! The inner iteration shared by all three algorithms.
//!
//! Every row of the record log describes one iterate `W^(l)`: its energy
//! (when `W^(l)` is orthonormal), its gradient norm, and the step that
//! produced it. Row 0 is the starting point.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::convergence::{check_convergence, Metrics};
use super::linesearch::{
    bb_step, bb_traces, initial_step, nonmonotone_search, NonmonotoneState, SearchError, SearchOutcome,
};
use super::params::{Algorithm, ConvergenceMode, OptimizerParams};
use super::timing::{Phase, PhaseClock};
use super::OptimizerError;
use crate::energy::{
    apply_hamiltonian_with_laplacian, build_hamiltonian_with_guess, energy_from_parts, kinetic_terms, laplacians,
    EnergyBreakdown, EnergyError, HamiltonianState, Problem,
};
use crate::grid::Field;
use crate::manifold::{
    diagonal_residuals, gram, orthonormalize, orthonormalize_with_gram, stiefel_gradient, subspace_rotate, GramMatrix,
    OrbitalSet, SearchDirections,
};

/// Adds the time since `since` to the last record, so row timings sum to the
/// clock totals.
pub(crate) fn charge_to_last(records: &mut [IterationRecord], since: (f64, f64), clock: &PhaseClock) {
    let (wall, par) = clock.snapshot();
    if let Some(r) = records.last_mut() {
        r.wall_ms += wall - since.0;
        r.par_ms += par - since.1;
    }
}

/// Off-diagonal Gram magnitude above which a step is flagged as drifting.
pub const DRIFT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub level: usize,
    pub iter: usize,
    /// `E(W^(l))`; only present when `W^(l)` is orthonormal.
    pub energy: Option<f64>,
    /// `||∇E||_F` where the full gradient was formed, otherwise `||Z||_F`.
    pub grad_norm: f64,
    pub tau: f64,
    pub backtracks: usize,
    pub did_orth: bool,
    pub did_diag: bool,
    /// Largest off-diagonal entry of `<W̃ᵀW̃>` before orthonormalization.
    pub offdiag_max: Option<f64>,
    /// Largest `|diag - 1|` of the same matrix.
    pub diag_dev: Option<f64>,
    pub wall_ms: f64,
    pub par_ms: f64,
    /// Reference value `C` the step was tested against.
    pub c_before: Option<f64>,
    /// `C - ρ₁ τ ||Z||²` at the accepted step.
    pub acceptance_bound: Option<f64>,
    pub c_after: Option<f64>,
    /// Sum of the convex weights making up `c_after`.
    pub weight_sum: Option<f64>,
    pub drift: bool,
    /// The step was retaken from the last orthonormal iterate after the line
    /// search from the unorthonormalized iterate stagnated.
    pub rollback: bool,
}

impl IterationRecord {
    /// Equality of every field except the timing columns.
    pub fn same_numerics(&self, other: &IterationRecord) -> bool {
        let strip = |r: &IterationRecord| IterationRecord { wall_ms: 0.0, par_ms: 0.0, ..r.clone() };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone, Default)]
struct StepInfo {
    tau: f64,
    backtracks: usize,
    did_orth: bool,
    did_diag: bool,
    offdiag_max: Option<f64>,
    diag_dev: Option<f64>,
    c_before: Option<f64>,
    acceptance_bound: Option<f64>,
    c_after: Option<f64>,
    weight_sum: Option<f64>,
    drift: bool,
    rollback: bool,
}

/// Last orthonormal iterate and its search direction.
struct Anchor {
    w: OrbitalSet,
    z: SearchDirections,
    z_norm_sq: f64,
    guess: Option<Field>,
}

/// Orbitals with their Laplacians and the Hamiltonian at their density.
struct Evaluation {
    w: OrbitalSet,
    laps: Vec<Field>,
    state: HamiltonianState,
    energy: Option<EnergyBreakdown>,
}

fn evaluate(
    w: OrbitalSet,
    problem: &Problem,
    guess: Option<&Field>,
    with_energy: bool,
    clock: &mut PhaseClock,
) -> Result<Evaluation, EnergyError> {
    let laps = laplacians(&w);
    clock.lap(Phase::Parallel);
    let state = build_hamiltonian_with_guess(&w, problem, guess)?;
    clock.lap(Phase::Sync);
    let energy = if with_energy {
        let kin = kinetic_terms(&w, &laps);
        clock.lap(Phase::Parallel);
        let e = energy_from_parts(&state, &kin)?;
        clock.lap(Phase::Sync);
        Some(e)
    } else {
        None
    };
    Ok(Evaluation { w, laps, state, energy })
}

fn h_times(ev: &Evaluation) -> OrbitalSet {
    let hw = ev
        .w
        .orbitals()
        .par_iter()
        .zip(ev.laps.par_iter())
        .map(|(u, l)| apply_hamiltonian_with_laplacian(&ev.state, u, l))
        .collect();
    OrbitalSet::new(hw).expect("H W has the shape of W")
}

fn hartree_guess(ev: &Evaluation) -> Option<Field> {
    ev.state.hartree_enabled.then(|| ev.state.hartree.clone())
}

struct Directions {
    z: SearchDirections,
    z_norm_sq: f64,
    full_norm: Option<f64>,
    full_mean_abs: Option<f64>,
}

fn directions(
    ev: &Evaluation,
    algorithm: Algorithm,
    want_full: bool,
    clock: &mut PhaseClock,
) -> Result<Directions, OptimizerError> {
    let hw = h_times(ev);
    clock.lap(Phase::Parallel);
    let out = match algorithm {
        Algorithm::OptmQr => {
            let (g, _) = stiefel_gradient(&ev.w, &hw)?;
            let sq = g.frobenius_sq();
            let mean = g.mean_abs();
            Directions { z: g, z_norm_sq: sq, full_norm: Some(sq.sqrt()), full_mean_abs: Some(mean) }
        }
        _ => {
            let (z, _) = diagonal_residuals(&ev.w, &hw)?;
            let z_norm_sq = z.frobenius_sq();
            clock.lap(Phase::Parallel);
            let (full_norm, full_mean_abs) = if want_full {
                let (g, _) = stiefel_gradient(&ev.w, &hw)?;
                (Some(g.frobenius_sq().sqrt()), Some(g.mean_abs()))
            } else {
                (None, None)
            };
            Directions { z, z_norm_sq, full_norm, full_mean_abs }
        }
    };
    clock.lap(Phase::Sync);
    Ok(out)
}

type Accepted = SearchOutcome<(Evaluation, GramMatrix)>;

/// Nonmonotone search along `W(τ) = Orth(w - τ z)`. Stagnation yields the
/// rejected trial energies.
#[allow(clippy::too_many_arguments)]
fn search_step(
    w: &OrbitalSet,
    z: &SearchDirections,
    z_norm_sq: f64,
    tau_raw: f64,
    guess: Option<&Field>,
    nm: &NonmonotoneState,
    problem: &Problem,
    params: &OptimizerParams,
    clock: &mut PhaseClock,
) -> Result<Result<Accepted, Vec<f64>>, OptimizerError> {
    let search = nonmonotone_search(tau_raw, z_norm_sq, nm, params.rho1, params.delta, params.max_backtracks, |tau| {
        let trial = w.step(tau, z);
        clock.lap(Phase::Parallel);
        let orth = orthonormalize_with_gram(&trial)?;
        clock.lap(Phase::Sync);
        let tev = evaluate(orth.orbitals, problem, guess, true, clock)?;
        let e = tev.energy.map(|e| e.total).unwrap_or(f64::NAN);
        Ok::<_, OptimizerError>((e, (tev, orth.input_gram)))
    });
    match search {
        Ok(out) => Ok(Ok(out)),
        Err(SearchError::Eval(e)) => Err(e),
        Err(SearchError::Stagnation { trial_energies, .. }) => Ok(Err(trial_energies)),
    }
}

/// Result of one inner solve.
#[derive(Debug, Clone)]
pub struct InnerOutcome {
    /// Final orthonormal orbitals.
    pub orbitals: OrbitalSet,
    pub energy: EnergyBreakdown,
    pub converged: bool,
    /// Number of steps taken.
    pub iterations: usize,
    /// `||∇E||_F` at the final orbitals.
    pub grad_norm: f64,
}

/// Runs the inner iteration from orthonormal `u0`, appending one record per
/// iterate to `records`. Rows written before an error stay in `records`.
pub fn run_inner(
    u0: OrbitalSet,
    problem: &Problem,
    params: &OptimizerParams,
    level: usize,
    clock: &mut PhaseClock,
    records: &mut Vec<IterationRecord>,
    observe: &mut dyn FnMut(&IterationRecord, &OrbitalSet),
) -> Result<InnerOutcome, OptimizerError> {
    let algorithm = params.algorithm;
    let orth_period = params.orth_period();
    let rotate_enabled = algorithm != Algorithm::OptmQr;
    let want_full = matches!(params.convergence_mode, ConvergenceMode::GradNorm | ConvergenceMode::MeanAbs);
    let (tau_min, tau_max) = (params.tau_min(), params.tau_max());
    let tol = params.threshold();

    let mut row_start = clock.snapshot();
    let mut ev = evaluate(u0, problem, None, true, clock)?;
    let e0 = ev.energy.map(|e| e.total).unwrap_or(f64::NAN);
    if !e0.is_finite() {
        return Err(OptimizerError::NonFinite { level, iter: 0 });
    }
    let mut nm = NonmonotoneState::new(e0, params.eta);
    let mut energies = vec![e0];
    let mut current_energy = Some(e0);
    let mut is_orth = true;
    let mut prev: Option<(OrbitalSet, SearchDirections)> = None;
    let mut step = StepInfo::default();
    let mut anchor: Option<Anchor> = None;
    let mut last_accepted = 0.0f64;
    // Step count of the most recent orthonormalization.
    let mut last_orth = 0usize;
    let mut l = 0usize;
    let converged = loop {
        let d = directions(&ev, algorithm, want_full && is_orth, clock)?;
        if !d.z_norm_sq.is_finite() {
            return Err(OptimizerError::NonFinite { level, iter: l });
        }
        let metrics = Metrics {
            grad_norm: if is_orth { d.full_norm } else { None },
            mean_abs: if is_orth { d.full_mean_abs } else { None },
            energies: &energies,
        };
        let converged =
            is_orth && (check_convergence(params.convergence_mode, tol, &metrics) || d.z_norm_sq == 0.0);

        let (wall, par) = clock.snapshot();
        records.push(IterationRecord {
            level,
            iter: l,
            energy: if is_orth { current_energy } else { None },
            grad_norm: d.full_norm.unwrap_or(d.z_norm_sq.sqrt()),
            tau: step.tau,
            backtracks: step.backtracks,
            did_orth: step.did_orth,
            did_diag: step.did_diag,
            offdiag_max: step.offdiag_max,
            diag_dev: step.diag_dev,
            wall_ms: wall - row_start.0,
            par_ms: par - row_start.1,
            c_before: step.c_before,
            acceptance_bound: step.acceptance_bound,
            c_after: step.c_after,
            weight_sum: step.weight_sum,
            drift: step.drift,
            rollback: step.rollback,
        });
        row_start = (wall, par);
        clock.lap(Phase::Sync);
        if let Some(r) = records.last() {
            observe(r, &ev.w);
        }
        clock.skip();
        if converged {
            break true;
        }
        if l >= params.max_inner {
            break false;
        }

        let tau_raw = match &prev {
            Some((pw, pz)) => {
                let t = bb_traces(&ev.w, pw, &d.z, pz, params.curvature_trace);
                clock.lap(Phase::Parallel);
                bb_step(t, params.bb_variant.at(l), tau_min, tau_max)
            }
            None => initial_step(d.z_norm_sq.sqrt(), tau_min, tau_max).unwrap_or(tau_max),
        };

        if l.is_multiple_of(orth_period) {
            let c_before = nm.c();
            let guess = hartree_guess(&ev);
            let first = search_step(&ev.w, &d.z, d.z_norm_sq, tau_raw, guess.as_ref(), &nm, problem, params, clock)?;
            let (out, from_w, from_z, rollback) = match (first, anchor.take()) {
                (Ok(out), _) => (out, ev.w, d.z, false),
                (Err(trials), Some(a)) => {
                    let retry =
                        search_step(&a.w, &a.z, a.z_norm_sq, tau_raw, a.guess.as_ref(), &nm, problem, params, clock)?;
                    match retry {
                        Ok(out) => (out, a.w, a.z, true),
                        Err(more) => {
                            return Err(OptimizerError::Stagnation {
                                level,
                                iter: l,
                                trial_energies: trials.into_iter().chain(more).collect(),
                                reference: c_before,
                            })
                        }
                    }
                }
                (Err(trial_energies), None) => {
                    return Err(OptimizerError::Stagnation { level, iter: l, trial_energies, reference: c_before })
                }
            };
            nm.update(out.energy);
            last_accepted = out.tau;
            let (mut next, input_gram) = out.trial;
            let (offdiag, diag_dev) = input_gram.identity_deviations();
            let (mut hist_w, mut hist_z) = (from_w, from_z);
            let mut did_diag = false;
            // A rotation due on an unorthonormalized step is done here.
            if rotate_enabled && params.n_diag.crossed(last_orth, l + 1) {
                let hw = h_times(&next);
                clock.lap(Phase::Parallel);
                let sigma = gram(&hw, &next.w)?;
                let rot = subspace_rotate(&next.w, &sigma)?;
                hist_w = hist_w.rotate(&rot.rotation);
                hist_z = hist_z.rotate(&rot.rotation);
                clock.lap(Phase::Sync);
                let guess = hartree_guess(&next);
                next = evaluate(rot.orbitals, problem, guess.as_ref(), false, clock)?;
                did_diag = true;
            }
            let drift = offdiag > DRIFT_THRESHOLD;
            if drift {
                warn!("level {level} iter {}: Gram off-diagonal {offdiag:.3e} before orthonormalization", l + 1);
            }
            energies.push(out.energy);
            current_energy = Some(out.energy);
            step = StepInfo {
                tau: out.tau,
                backtracks: out.backtracks,
                did_orth: true,
                did_diag,
                offdiag_max: Some(offdiag),
                diag_dev: Some(diag_dev),
                c_before: Some(c_before),
                acceptance_bound: Some(out.bound),
                c_after: Some(nm.c()),
                weight_sum: Some(nm.weight_sum()),
                drift,
                rollback,
            };
            prev = Some((hist_w, hist_z));
            last_orth = l + 1;
            ev = next;
            is_orth = true;
        } else {
            // Unchecked steps never exceed the last step the line search accepted.
            let tau_raw = if last_accepted > 0.0 { tau_raw.min(last_accepted) } else { tau_raw };
            let trial = ev.w.step(tau_raw, &d.z);
            clock.lap(Phase::Parallel);
            let guess = hartree_guess(&ev);
            if is_orth {
                anchor = Some(Anchor {
                    w: ev.w.clone(),
                    z: d.z.clone(),
                    z_norm_sq: d.z_norm_sq,
                    guess: guess.clone(),
                });
            }
            let next = evaluate(trial, problem, guess.as_ref(), false, clock)?;
            let old = std::mem::replace(&mut ev, next);
            prev = Some((old.w, d.z));
            step = StepInfo { tau: tau_raw, ..StepInfo::default() };
            current_energy = None;
            is_orth = false;
        }
        l += 1;
    };

    let fin = if is_orth {
        ev
    } else {
        let w = orthonormalize(&ev.w)?;
        clock.lap(Phase::Sync);
        let guess = hartree_guess(&ev);
        evaluate(w, problem, guess.as_ref(), false, clock)?
    };
    let kin = kinetic_terms(&fin.w, &fin.laps);
    let energy = energy_from_parts(&fin.state, &kin)?;
    let hw = h_times(&fin);
    let (g, _) = stiefel_gradient(&fin.w, &hw)?;
    let grad_norm = g.frobenius_sq().sqrt();
    clock.lap(Phase::Sync);
    charge_to_last(records, row_start, clock);
    Ok(InnerOutcome { orbitals: fin.w, energy, converged, iterations: l, grad_norm })
}
