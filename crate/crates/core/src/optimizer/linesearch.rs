//! Barzilai-Borwein steps and the Zhang-Hager nonmonotone backtracking rule.

use rayon::prelude::*;

use super::params::{BbVariant, CurvatureTrace};
use crate::grid::dot;
use crate::manifold::{OrbitalSet, SearchDirections};

/// Reference value `C` and weight accumulator `Q` of the nonmonotone rule.
///
/// The convex weights of `C` over the accepted energies are tracked
/// alongside so the combination can be audited.
#[derive(Debug, Clone, PartialEq)]
pub struct NonmonotoneState {
    c: f64,
    q: f64,
    eta: f64,
    weights: Vec<f64>,
}

impl NonmonotoneState {
    /// `C⁰ = E⁰`, `Q⁰ = 1`.
    pub fn new(e0: f64, eta: f64) -> Self {
        NonmonotoneState { c: e0, q: 1.0, eta, weights: vec![1.0] }
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Weight of each accepted energy in `C`, oldest first.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Right-hand side `C - ρ₁ τ ||Z||_F²` of the acceptance test.
    pub fn bound(&self, rho1: f64, tau: f64, z_norm_sq: f64) -> f64 {
        self.c - rho1 * tau * z_norm_sq
    }

    /// `Q' = ηQ + 1`, `C' = (ηQC + E)/Q'`.
    pub fn update(&mut self, energy: f64) {
        let eq = self.eta * self.q;
        let q_new = eq + 1.0;
        self.c = (eq * self.c + energy) / q_new;
        let keep = eq / q_new;
        self.weights.iter_mut().for_each(|w| *w *= keep);
        self.weights.push(1.0 / q_new);
        self.q = q_new;
    }
}

/// The three traces feeding a BB step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BbTraces {
    /// `tr<SᵀS>`.
    pub ss: f64,
    /// `tr|<SᵀY>|` in the configured reading.
    pub sy: f64,
    /// `tr<YᵀY>`.
    pub yy: f64,
}

/// Computes the diagonal products `<s_i,s_i>`, `<s_i,y_i>`, `<y_i,y_i>`
/// orbital by orbital, with `S = W - W_prev` and `Y = Z - Z_prev`.
pub fn bb_traces(
    w: &OrbitalSet,
    w_prev: &OrbitalSet,
    z: &SearchDirections,
    z_prev: &SearchDirections,
    mode: CurvatureTrace,
) -> BbTraces {
    let weight = w.grid().weight();
    let per: Vec<(f64, f64, f64)> = (0..w.len())
        .into_par_iter()
        .map(|i| {
            let s: Vec<f64> =
                w.orbitals()[i].values().iter().zip(w_prev.orbitals()[i].values()).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = z.directions()[i]
                .values()
                .iter()
                .zip(z_prev.directions()[i].values())
                .map(|(a, b)| a - b)
                .collect();
            (weight * dot(&s, &s), weight * dot(&s, &y), weight * dot(&y, &y))
        })
        .collect();
    let ss = per.iter().map(|p| p.0).sum();
    let yy = per.iter().map(|p| p.2).sum();
    let sy = match mode {
        CurvatureTrace::Entrywise => per.iter().map(|p| p.1.abs()).sum(),
        CurvatureTrace::AbsOfTrace => per.iter().map(|p| p.1).sum::<f64>().abs(),
    };
    BbTraces { ss, sy, yy }
}

/// `τ¹ = tr<SᵀS>/tr|<SᵀY>|` or `τ² = tr|<SᵀY>|/tr<YᵀY>`, clamped to
/// `[tau_min, tau_max]`. Non-finite ratios map to `tau_max`.
pub fn bb_step(traces: BbTraces, variant: BbVariant, tau_min: f64, tau_max: f64) -> f64 {
    let raw = match variant {
        BbVariant::Bb2 => traces.sy / traces.yy,
        _ => traces.ss / traces.sy,
    };
    if !raw.is_finite() {
        return tau_max;
    }
    raw.clamp(tau_min, tau_max)
}

/// First step when no BB history exists: `min(tau_max, 1/||Z||_F)`, at least
/// `tau_min`. `None` when `Z` vanishes.
pub fn initial_step(z_norm: f64, tau_min: f64, tau_max: f64) -> Option<f64> {
    if z_norm == 0.0 {
        return None;
    }
    let tau = 1.0 / z_norm;
    Some(if tau.is_finite() { tau.min(tau_max).max(tau_min) } else { tau_max })
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<T> {
    pub tau: f64,
    pub backtracks: usize,
    pub energy: f64,
    /// `C - ρ₁ τ ||Z||²` at the accepted `τ`.
    pub bound: f64,
    pub trial: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SearchError<E> {
    /// No `s ≤ max_backtracks` satisfied the test.
    Stagnation { trial_energies: Vec<f64>, c: f64 },
    Eval(E),
}

/// Tries `τ = τ_raw δ^s` for `s = 0, 1, ..., max_backtracks` and accepts the
/// first trial with `E ≤ C - ρ₁ τ ||Z||²`. `eval` maps a step size to the
/// trial energy and whatever the caller wants to keep from the trial.
#[allow(clippy::too_many_arguments)]
pub fn nonmonotone_search<T, E>(
    tau_raw: f64,
    z_norm_sq: f64,
    state: &NonmonotoneState,
    rho1: f64,
    delta: f64,
    max_backtracks: usize,
    mut eval: impl FnMut(f64) -> Result<(f64, T), E>,
) -> Result<SearchOutcome<T>, SearchError<E>> {
    let mut trial_energies = Vec::new();
    let mut tau = tau_raw;
    for s in 0..=max_backtracks {
        let (energy, trial) = eval(tau).map_err(SearchError::Eval)?;
        let bound = state.bound(rho1, tau, z_norm_sq);
        if energy <= bound {
            return Ok(SearchOutcome { tau, backtracks: s, energy, bound, trial });
        }
        trial_energies.push(energy);
        tau *= delta;
    }
    Err(SearchError::Stagnation { trial_energies, c: state.c() })
}
