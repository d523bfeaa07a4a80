//! Model total energy, density, potentials and the Hamiltonian action.
//!
//! For orbitals `U = (u_1, ..., u_N)` on a grid the energy is
//!
//! ```text
//! E(U) = -1/2 Σ_i <Δ_h u_i, u_i> + <V_ext, ρ> + 1/2 <v_H, ρ> + <ε_x(ρ), ρ>
//! ```
//!
//! with `ρ = Σ_i u_i²`. The Hamiltonian is `H(ρ) = -1/2 Δ_h + V_ext + v_H + v_x`.
//!
//! Gradient convention: the derivative of `E` with respect to `u_i` in the
//! discrete `L²` inner product is `2 H(ρ) u_i`, so the directional derivative
//! along `D` is `2 tr<(H U)ᵀ D>`. The optimizers work with `H U - U Σ`
//! (half the Riemannian gradient); the factor two is absorbed into the step.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{apply_laplacian, dot, inner_product, same_grid, Field, Grid, GridError};
use crate::manifold::OrbitalSet;
use crate::poisson::{solve_neg_laplacian, CgSettings, PoissonError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Poisson(#[from] PoissonError),
    #[error("atom {index} lies outside the simulation box")]
    AtomOutsideBox { index: usize },
    #[error("atom {index}: {reason}")]
    InvalidAtom { index: usize, reason: &'static str },
    #[error("poisson Hartree mode needs a 3D grid, got dimension {0}")]
    PoissonDimension(usize),
    #[error("density is negative or non-finite at point {index}")]
    NegativeDensity { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    /// Position in bohr, box coordinates `[0, L]^d`.
    pub position: Vec<f64>,
    /// Nuclear charge `Z > 0`.
    pub charge: f64,
    /// Softening length `a > 0` in bohr.
    pub softening: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AtomList(Vec<Atom>);

impl AtomList {
    pub fn new(entries: Vec<Atom>) -> Result<Self, EnergyError> {
        for (index, a) in entries.iter().enumerate() {
            if !(a.charge.is_finite() && a.charge > 0.0) {
                return Err(EnergyError::InvalidAtom { index, reason: "charge must be positive" });
            }
            if !(a.softening.is_finite() && a.softening > 0.0) {
                return Err(EnergyError::InvalidAtom { index, reason: "softening must be positive" });
            }
        }
        Ok(AtomList(entries))
    }

    pub fn empty() -> Self {
        AtomList(Vec::new())
    }

    pub fn entries(&self) -> &[Atom] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_inside(&self, grid: &Grid) -> Result<(), EnergyError> {
        match self.0.iter().position(|a| !grid.contains(&a.position)) {
            Some(index) => Err(EnergyError::AtomOutsideBox { index }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HartreeMode {
    /// Direct quadrature with the softened kernel `1/sqrt(|r - r'|² + 1)`.
    Kernel,
    /// Conjugate-gradient solve of `-Δ_h v_H = 4πρ` (3D only).
    Poisson,
}

impl HartreeMode {
    pub fn default_for(dimension: usize) -> Self {
        if dimension == 3 {
            HartreeMode::Poisson
        } else {
            HartreeMode::Kernel
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnergyFlags {
    pub hartree: bool,
    pub xc: bool,
    pub hartree_mode: HartreeMode,
}

impl EnergyFlags {
    /// Kinetic and external terms only.
    pub fn linear() -> Self {
        EnergyFlags { hartree: false, xc: false, hartree_mode: HartreeMode::Kernel }
    }

    pub fn full(dimension: usize) -> Self {
        EnergyFlags { hartree: true, xc: true, hartree_mode: HartreeMode::default_for(dimension) }
    }

    pub fn is_linear(&self) -> bool {
        !self.hartree && !self.xc
    }
}

/// A discretized problem instance: grid, nuclei and enabled terms, with the
/// density-independent pieces precomputed.
#[derive(Debug, Clone)]
pub struct Problem {
    grid: Arc<Grid>,
    atoms: AtomList,
    flags: EnergyFlags,
    v_ext: Field,
    kernel_table: Option<Arc<Vec<f64>>>,
    cg: CgSettings,
}

impl Problem {
    pub fn new(grid: Arc<Grid>, atoms: AtomList, flags: EnergyFlags) -> Result<Self, EnergyError> {
        if flags.hartree && flags.hartree_mode == HartreeMode::Poisson && grid.dimension() != 3 {
            return Err(EnergyError::PoissonDimension(grid.dimension()));
        }
        let v_ext = external_potential(&atoms, &grid)?;
        let kernel_table = (flags.hartree && flags.hartree_mode == HartreeMode::Kernel)
            .then(|| Arc::new(softened_kernel_table(&grid)));
        Ok(Problem { grid, atoms, flags, v_ext, kernel_table, cg: CgSettings::default() })
    }

    pub fn with_cg_settings(mut self, cg: CgSettings) -> Self {
        self.cg = cg;
        self
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn atoms(&self) -> &AtomList {
        &self.atoms
    }

    pub fn flags(&self) -> EnergyFlags {
        self.flags
    }

    pub fn external(&self) -> &Field {
        &self.v_ext
    }

    /// The same problem on another grid (used between refinement levels).
    pub fn on_grid(&self, grid: Arc<Grid>) -> Result<Problem, EnergyError> {
        Ok(Problem::new(grid, self.atoms.clone(), self.flags)?.with_cg_settings(self.cg))
    }
}

/// `ρ(p) = Σ_i u_i(p)²`, accumulated over orbitals in index order.
pub fn density(orbitals: &OrbitalSet) -> Field {
    let grid = orbitals.grid();
    let fields = orbitals.orbitals();
    let mut rho = vec![0.0; grid.len()];
    let fill = |start: usize, chunk: &mut [f64]| {
        for u in fields {
            let v = &u.values()[start..start + chunk.len()];
            for (r, x) in chunk.iter_mut().zip(v) {
                *r += x * x;
            }
        }
    };
    const CHUNK: usize = 2048;
    if rho.len() > CHUNK {
        rho.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| fill(c * CHUNK, chunk));
    } else {
        fill(0, &mut rho);
    }
    Field::from_raw(grid, rho)
}

/// Softened Coulomb attraction `V(r) = -Σ_I Z_I / sqrt(|r - R_I|² + a_I²)`.
pub fn external_potential(atoms: &AtomList, grid: &Arc<Grid>) -> Result<Field, EnergyError> {
    atoms.check_inside(grid)?;
    let values = (0..grid.len())
        .map(|p| {
            let r = grid.coords(p);
            let mut v = 0.0;
            for a in atoms.entries() {
                let d2: f64 = r.iter().zip(&a.position).map(|(x, y)| (x - y) * (x - y)).sum();
                v -= a.charge / (d2 + a.softening * a.softening).sqrt();
            }
            v
        })
        .collect();
    Ok(Field::from_raw(grid, values))
}

/// `1/sqrt(|Δr|² + 1)` indexed by absolute per-axis index offsets, stored
/// in the grid's lexicographic layout.
fn softened_kernel_table(grid: &Grid) -> Vec<f64> {
    (0..grid.len())
        .map(|p| {
            let idx = grid.multi_index(p);
            let d2: f64 = idx.iter().zip(grid.spacing()).map(|(&i, &h)| (i as f64 * h).powi(2)).sum();
            1.0 / (d2 + 1.0).sqrt()
        })
        .collect()
}

fn kernel_hartree(rho: &Field, table: &[f64]) -> Field {
    let grid = rho.grid();
    let mut dims = [1usize; 3];
    let off = 3 - grid.dimension();
    dims[off..].copy_from_slice(grid.points_per_axis());
    let [n0, n1, n2] = dims;
    let r = rho.values();
    let w = grid.weight();
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let i2 = p % n2;
            let i1 = (p / n2) % n1;
            let i0 = p / (n1 * n2);
            let mut acc = 0.0;
            for j0 in 0..n0 {
                let d0 = i0.abs_diff(j0);
                for j1 in 0..n1 {
                    let d1 = i1.abs_diff(j1);
                    let trow = &table[(d0 * n1 + d1) * n2..];
                    let rrow = &r[(j0 * n1 + j1) * n2..(j0 * n1 + j1 + 1) * n2];
                    for (j2, &rv) in rrow.iter().enumerate() {
                        acc += rv * trow[i2.abs_diff(j2)];
                    }
                }
            }
            w * acc
        })
        .collect();
    Field::from_raw(grid, values)
}

/// Hartree potential of `rho` under the given mode. `guess` warm-starts
/// the Poisson solve and is ignored in kernel mode.
pub fn hartree_potential(
    rho: &Field,
    mode: HartreeMode,
    guess: Option<&Field>,
    cg: CgSettings,
) -> Result<Field, EnergyError> {
    check_density(rho)?;
    match mode {
        HartreeMode::Kernel => Ok(kernel_hartree(rho, &softened_kernel_table(rho.grid()))),
        HartreeMode::Poisson => poisson_hartree(rho, guess, cg),
    }
}

fn poisson_hartree(rho: &Field, guess: Option<&Field>, cg: CgSettings) -> Result<Field, EnergyError> {
    let dim = rho.grid().dimension();
    if dim != 3 {
        return Err(EnergyError::PoissonDimension(dim));
    }
    let rhs = rho.scaled(4.0 * std::f64::consts::PI);
    Ok(solve_neg_laplacian(&rhs, guess, cg)?.0)
}

fn check_density(rho: &Field) -> Result<(), EnergyError> {
    match rho.values().iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
        Some(index) => Err(EnergyError::NegativeDensity { index }),
        None => Ok(()),
    }
}

/// Dirac exchange constant `C_x = (3/4)(3/π)^{1/3}`.
pub fn dirac_cx() -> f64 {
    0.75 * (3.0 / std::f64::consts::PI).cbrt()
}

/// Exchange energy per particle `ε_x(ρ) = -C_x ρ^{1/3}`.
pub fn xc_energy_density(rho: &Field) -> Result<Field, EnergyError> {
    check_density(rho)?;
    let cx = dirac_cx();
    Ok(Field::from_raw(rho.grid(), rho.values().iter().map(|&r| -cx * r.cbrt()).collect()))
}

/// Exchange potential `v_x = d(ρ ε_x)/dρ = (4/3) ε_x(ρ)`.
pub fn xc_potential(rho: &Field) -> Result<Field, EnergyError> {
    check_density(rho)?;
    let c = 4.0 / 3.0 * dirac_cx();
    Ok(Field::from_raw(rho.grid(), rho.values().iter().map(|&r| -c * r.cbrt()).collect()))
}

/// Everything needed to apply `H(ρ)` at a fixed density.
#[derive(Debug, Clone)]
pub struct HamiltonianState {
    pub density: Field,
    pub external: Field,
    pub hartree: Field,
    pub xc: Field,
    pub hartree_enabled: bool,
    pub xc_enabled: bool,
    pub(crate) total: Field,
}

impl HamiltonianState {
    pub fn grid(&self) -> &Arc<Grid> {
        self.density.grid()
    }

    /// `V_ext + v_H + v_xc`, summed in that order.
    pub fn total_potential(&self) -> &Field {
        &self.total
    }

    /// The state for an explicitly given density.
    pub fn from_density(
        density: Field,
        problem: &Problem,
        hartree_guess: Option<&Field>,
    ) -> Result<Self, EnergyError> {
        let grid = problem.grid();
        if !same_grid(density.grid(), grid) {
            return Err(GridError::Mismatch.into());
        }
        check_density(&density)?;
        let flags = problem.flags;
        let hartree = if flags.hartree {
            match (flags.hartree_mode, &problem.kernel_table) {
                (HartreeMode::Kernel, Some(table)) => kernel_hartree(&density, table),
                (HartreeMode::Kernel, None) => kernel_hartree(&density, &softened_kernel_table(grid)),
                (HartreeMode::Poisson, _) => poisson_hartree(&density, hartree_guess, problem.cg)?,
            }
        } else {
            Field::zeros(grid)
        };
        let xc = if flags.xc { xc_potential(&density)? } else { Field::zeros(grid) };
        let external = problem.v_ext.clone();
        let total = Field::from_raw(
            grid,
            external
                .values()
                .iter()
                .zip(hartree.values())
                .zip(xc.values())
                .map(|((a, b), c)| a + b + c)
                .collect(),
        );
        Ok(HamiltonianState {
            density,
            external,
            hartree,
            xc,
            hartree_enabled: flags.hartree,
            xc_enabled: flags.xc,
            total,
        })
    }
}

pub fn build_hamiltonian(orbitals: &OrbitalSet, problem: &Problem) -> Result<HamiltonianState, EnergyError> {
    build_hamiltonian_with_guess(orbitals, problem, None)
}

/// As [`build_hamiltonian`], warm-starting a Poisson solve from `hartree_guess`.
pub fn build_hamiltonian_with_guess(
    orbitals: &OrbitalSet,
    problem: &Problem,
    hartree_guess: Option<&Field>,
) -> Result<HamiltonianState, EnergyError> {
    if !same_grid(orbitals.grid(), problem.grid()) {
        return Err(GridError::Mismatch.into());
    }
    HamiltonianState::from_density(density(orbitals), problem, hartree_guess)
}

/// `H u = -1/2 Δ_h u + (V_ext + v_H + v_xc) u`.
pub fn apply_hamiltonian(state: &HamiltonianState, u: &Field) -> Result<Field, EnergyError> {
    u.check_same_grid(&state.density)?;
    let lap = apply_laplacian(u);
    Ok(apply_hamiltonian_with_laplacian(state, u, &lap))
}

/// Hamiltonian action reusing a precomputed `Δ_h u`.
pub fn apply_hamiltonian_with_laplacian(state: &HamiltonianState, u: &Field, lap_u: &Field) -> Field {
    let v = state.total.values();
    let values = lap_u
        .values()
        .iter()
        .zip(u.values())
        .zip(v)
        .map(|((l, x), p)| -0.5 * l + p * x)
        .collect();
    Field::from_raw(u.grid(), values)
}

/// `Δ_h u_i` for every orbital, computed independently per orbital.
pub fn laplacians(orbitals: &OrbitalSet) -> Vec<Field> {
    orbitals.orbitals().par_iter().map(apply_laplacian).collect()
}

/// Per-orbital kinetic energies `-1/2 <Δ_h u_i, u_i>`.
pub fn kinetic_terms(orbitals: &OrbitalSet, laps: &[Field]) -> Vec<f64> {
    let w = orbitals.grid().weight();
    orbitals
        .orbitals()
        .par_iter()
        .zip(laps.par_iter())
        .map(|(u, l)| -0.5 * w * dot(l.values(), u.values()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub kinetic: f64,
    pub external: f64,
    pub hartree: f64,
    pub xc: f64,
    pub total: f64,
}

/// Combines per-orbital kinetic terms with the density-dependent terms of `state`.
pub fn energy_from_parts(state: &HamiltonianState, kinetic: &[f64]) -> Result<EnergyBreakdown, EnergyError> {
    let kinetic: f64 = kinetic.iter().sum();
    let rho = &state.density;
    let external = inner_product(&state.external, rho)?;
    let hartree = if state.hartree_enabled { 0.5 * inner_product(&state.hartree, rho)? } else { 0.0 };
    let xc = if state.xc_enabled { inner_product(&xc_energy_density(rho)?, rho)? } else { 0.0 };
    Ok(EnergyBreakdown { kinetic, external, hartree, xc, total: kinetic + external + hartree + xc })
}

pub fn total_energy(orbitals: &OrbitalSet, problem: &Problem) -> Result<EnergyBreakdown, EnergyError> {
    let state = build_hamiltonian(orbitals, problem)?;
    let laps = laplacians(orbitals);
    energy_from_parts(&state, &kinetic_terms(orbitals, &laps))
}
