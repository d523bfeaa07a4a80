//! Brute-force references: the Hamiltonian as a dense matrix, its exact
//! low eigenpairs, the Kohn-Sham residual and finite-difference gradients.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::energy::{apply_hamiltonian, build_hamiltonian, total_energy, EnergyError, HamiltonianState, Problem};
use crate::grid::{dot, Field};
use crate::manifold::{gram, subspace_rotate, ManifoldError, OrbitalSet, SearchDirections};

/// Largest grid that will be materialized.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{points} grid points exceed the dense limit of {limit}")]
    TooLarge { points: usize, limit: usize },
    #[error("materialized operator is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("requested {requested} eigenpairs of a {size}x{size} operator")]
    TooManyEigenpairs { requested: usize, size: usize },
    #[error("eigenpair {index} has residual {residual:e}")]
    EigenResidual { index: usize, residual: f64 },
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// `H` at a fixed density as an explicit symmetric matrix in the grid-point
/// basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Column `j` is `H e_j`.
pub fn materialize(state: &HamiltonianState) -> Result<DenseOperator, OracleError> {
    let grid = state.grid();
    let n = grid.len();
    if n > DENSE_LIMIT {
        return Err(OracleError::TooLarge { points: n, limit: DENSE_LIMIT });
    }
    let mut matrix = DMatrix::zeros(n, n);
    let mut e = Field::zeros(grid);
    for j in 0..n {
        e.values_mut()[j] = 1.0;
        let col = apply_hamiltonian(state, &e)?;
        matrix.set_column(j, &DVector::from_column_slice(col.values()));
        e.values_mut()[j] = 0.0;
    }
    let asym = (&matrix - matrix.transpose()).amax();
    if asym > 1e-12 {
        return Err(OracleError::Asymmetric(asym));
    }
    Ok(DenseOperator { matrix })
}

/// The `k` smallest eigenpairs, ascending. Eigenvectors are unit vectors in
/// the Euclidean sense (columns of the returned matrix).
pub fn dense_eigensolve(op: &DenseOperator, k: usize) -> Result<(Vec<f64>, DMatrix<f64>), OracleError> {
    let n = op.size();
    if k > n {
        return Err(OracleError::TooManyEigenpairs { requested: k, size: n });
    }
    let eig = SymmetricEigen::new(op.matrix.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let norm = op.matrix.amax().max(f64::MIN_POSITIVE) * n as f64;
    let mut values = Vec::with_capacity(k);
    let mut vectors = DMatrix::zeros(n, k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[src];
        let v = eig.eigenvectors.column(src);
        let residual = (&op.matrix * v - v * lambda).norm();
        if !(residual <= 1e-10 * norm) {
            return Err(OracleError::EigenResidual { index: dst, residual });
        }
        values.push(lambda);
        vectors.set_column(dst, &v);
    }
    Ok((values, vectors))
}

/// Sum of the `k` smallest eigenvalues of `H` at the density of `orbitals`.
/// For a problem without Hartree or exchange terms the density is irrelevant.
pub fn lowest_eigenvalue_sum(orbitals: &OrbitalSet, problem: &Problem, k: usize) -> Result<f64, OracleError> {
    let state = build_hamiltonian(orbitals, problem)?;
    let (values, _) = dense_eigensolve(&materialize(&state)?, k)?;
    Ok(values.iter().sum())
}

/// `||H(ρ_U) W - W Λ||_F` where `W` is `U` rotated onto the eigenbasis of
/// `Σ = <(HU)ᵀU>` and `Λ` holds the Rayleigh quotients `<H w_i, w_i>`.
pub fn ks_residual(u: &OrbitalSet, problem: &Problem) -> Result<f64, OracleError> {
    let state = build_hamiltonian(u, problem)?;
    let apply = |set: &OrbitalSet| -> Result<OrbitalSet, OracleError> {
        let hs = set.orbitals().iter().map(|f| apply_hamiltonian(&state, f)).collect::<Result<Vec<_>, _>>()?;
        Ok(OrbitalSet::new(hs)?)
    };
    let hu = apply(u)?;
    let sigma = gram(&hu, u)?;
    let w = subspace_rotate(u, &sigma)?.orbitals;
    let hw = apply(&w)?;
    let weight = u.grid().weight();
    let residuals: Vec<Field> = w
        .orbitals()
        .iter()
        .zip(hw.orbitals())
        .map(|(wi, hi)| {
            let lambda = weight * dot(hi.values(), wi.values());
            hi.add_scaled(-lambda, wi)
        })
        .collect::<Result<_, _>>()
        .map_err(ManifoldError::from)?;
    Ok(SearchDirections::new(residuals).frobenius_sq().sqrt())
}

/// Central-difference directional derivative of `E` along `d` compared with
/// the analytic value `2 tr<(HU)ᵀD>`; returns
/// `|fd - analytic| / max(1, |analytic|)`.
pub fn fd_gradient_check(u: &OrbitalSet, d: &SearchDirections, t: f64, problem: &Problem) -> Result<f64, OracleError> {
    let state = build_hamiltonian(u, problem)?;
    let weight = u.grid().weight();
    let mut analytic = 0.0;
    for (ui, di) in u.orbitals().iter().zip(d.directions()) {
        let hu = apply_hamiltonian(&state, ui)?;
        analytic += 2.0 * weight * dot(hu.values(), di.values());
    }
    if d.directions().iter().all(|f| f.values().iter().all(|&v| v == 0.0)) {
        return Ok(0.0);
    }
    let plus = OrbitalSet::new(u.step(-t, d).into_orbitals())?;
    let minus = u.step(t, d);
    let fd = (total_energy(&plus, problem)?.total - total_energy(&minus, problem)?.total) / (2.0 * t);
    Ok((fd - analytic).abs() / analytic.abs().max(1.0))
}
