#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use parorb::energy::{Atom, AtomList, EnergyFlags, HartreeMode, Problem};
use parorb::grid::{Field, Grid};
use parorb::manifold::{OrbitalSet, SearchDirections};
use parorb::optimizer::{Algorithm, ConvergenceMode, OptimizerParams, Period};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn grid_1d(points: usize) -> Arc<Grid> {
    Arc::new(Grid::new(1, &[20.0], &[points]).unwrap())
}

fn atom(x: f64, charge: f64) -> Atom {
    Atom { position: vec![x], charge, softening: 1.0 }
}

/// Single soft-Coulomb well, kinetic and external terms only.
pub fn linear_problem(points: usize) -> Problem {
    let atoms = AtomList::new(vec![atom(10.0, 4.0)]).unwrap();
    Problem::new(grid_1d(points), atoms, EnergyFlags::linear()).unwrap()
}

/// Two wells with kernel Hartree and Dirac exchange.
pub fn two_well_problem(points: usize) -> Problem {
    let atoms = AtomList::new(vec![atom(7.0, 2.0), atom(13.0, 2.0)]).unwrap();
    let flags = EnergyFlags { hartree: true, xc: true, hartree_mode: HartreeMode::Kernel };
    Problem::new(grid_1d(points), atoms, flags).unwrap()
}

/// One well at the box centre with a Poisson Hartree solve.
pub fn box_3d_problem(points: usize, charge: f64) -> Problem {
    let grid = Arc::new(Grid::new(3, &[10.0; 3], &[points; 3]).unwrap());
    let atoms = AtomList::new(vec![Atom { position: vec![5.0; 3], charge, softening: 1.0 }]).unwrap();
    Problem::new(grid, atoms, EnergyFlags::full(3)).unwrap()
}

pub fn params(algorithm: Algorithm, seed: u64) -> OptimizerParams {
    OptimizerParams { algorithm, seed, ..OptimizerParams::default() }
}

/// opt_par_mod orthonormalizing every second step, rotating every 50.
pub fn mod_params(seed: u64) -> OptimizerParams {
    OptimizerParams { n_org: 2, n_diag: Period::every(50), ..params(Algorithm::OptParMod, seed) }
}

pub fn parallel_3d_params(seed: u64, max_inner: usize) -> OptimizerParams {
    OptimizerParams { max_inner, convergence_mode: ConvergenceMode::EnergyChange, ..mod_params(seed) }
}

pub const ALGORITHMS: [Algorithm; 3] = [Algorithm::OptmQr, Algorithm::OptPar, Algorithm::OptParMod];

/// The parameter set each algorithm is run with on the two-well problem.
pub fn two_well_params(algorithm: Algorithm, seed: u64) -> OptimizerParams {
    match algorithm {
        Algorithm::OptParMod => mod_params(seed),
        a => params(a, seed),
    }
}

pub fn random_fields(grid: &Arc<Grid>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Field> {
    (0..n)
        .map(|_| {
            let values: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Field::from_values(grid, values).unwrap()
        })
        .collect()
}

pub fn random_directions(grid: &Arc<Grid>, n: usize, rng: &mut ChaCha8Rng) -> SearchDirections {
    SearchDirections::new(random_fields(grid, n, rng))
}

/// Orthogonal matrix from the QR factorization of a random square matrix.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    a.qr().q()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

pub fn orbitals_from(fields: Vec<Field>) -> OrbitalSet {
    OrbitalSet::new(fields).unwrap()
}
