//! Orbital sets on the Stiefel manifold `<UᵀU> = I`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{dot, same_grid, Field, Grid, GridError};

/// Rank test: the smallest Gram eigenvalue must exceed this times the largest.
pub const RANK_TOL: f64 = 1e-12;
/// Orthonormality promised by [`orthonormalize`].
pub const ORTHO_TOL: f64 = 1e-10;
/// Allowed asymmetry of Σ before it is symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Gram condition number above which Cholesky-QR is applied twice.
const REORTH_CONDITION: f64 = 1e5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("an orbital set needs at least one orbital")]
    Empty,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("orbital counts differ: {left} vs {right}")]
    CountMismatch { left: usize, right: usize },
    #[error("orbital set is numerically rank deficient (eigenvalue ratio {ratio:e})")]
    Degenerate { ratio: f64 },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },
    #[error("orthonormalization left a Gram deviation of {deviation:e}")]
    NotOrthonormal { deviation: f64 },
    #[error("symmetric eigendecomposition produced non-finite values")]
    NonFinite,
}

/// `N` orbitals sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitalSet {
    orbitals: Vec<Field>,
}

impl OrbitalSet {
    pub fn new(orbitals: Vec<Field>) -> Result<Self, ManifoldError> {
        let first = orbitals.first().ok_or(ManifoldError::Empty)?;
        for u in &orbitals[1..] {
            first.check_same_grid(u)?;
        }
        Ok(OrbitalSet { orbitals })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.orbitals[0].grid()
    }

    pub fn len(&self) -> usize {
        self.orbitals.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn orbitals(&self) -> &[Field] {
        &self.orbitals
    }

    pub fn into_orbitals(self) -> Vec<Field> {
        self.orbitals
    }

    /// `U M`: column `j` of the result is `Σ_k u_k M_kj`.
    pub fn rotate(&self, m: &DMatrix<f64>) -> OrbitalSet {
        assert_eq!(m.nrows(), self.len());
        OrbitalSet { orbitals: combine(&self.orbitals, m) }
    }

    /// `max |<UᵀU> - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        gram_sym(&self.orbitals).max_identity_deviation()
    }

    pub fn check_compatible(&self, other: &OrbitalSet) -> Result<(), ManifoldError> {
        if self.len() != other.len() {
            return Err(ManifoldError::CountMismatch { left: self.len(), right: other.len() });
        }
        if !same_grid(self.grid(), other.grid()) {
            return Err(GridError::Mismatch.into());
        }
        Ok(())
    }

    /// `self - tau * z`, orbital by orbital.
    pub fn step(&self, tau: f64, z: &SearchDirections) -> OrbitalSet {
        let orbitals = self
            .orbitals
            .par_iter()
            .zip(z.directions().par_iter())
            .map(|(w, d)| {
                let values = w.values().iter().zip(d.values()).map(|(a, b)| a - tau * b).collect();
                Field::from_raw(w.grid(), values)
            })
            .collect();
        OrbitalSet { orbitals }
    }
}

/// Per-orbital search directions `z_1, ..., z_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchDirections {
    directions: Vec<Field>,
}

impl SearchDirections {
    pub fn new(directions: Vec<Field>) -> Self {
        SearchDirections { directions }
    }

    pub fn directions(&self) -> &[Field] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn rotate(&self, m: &DMatrix<f64>) -> SearchDirections {
        SearchDirections { directions: combine(&self.directions, m) }
    }

    /// `tr<ZᵀZ> = ||Z||_F²` with per-orbital terms summed in order.
    pub fn frobenius_sq(&self) -> f64 {
        let Some(first) = self.directions.first() else { return 0.0 };
        let w = first.grid().weight();
        let terms: Vec<f64> = self.directions.par_iter().map(|z| w * dot(z.values(), z.values())).collect();
        terms.iter().sum()
    }

    /// Mean absolute entry of the `N_g × N` matrix of grid values.
    pub fn mean_abs(&self) -> f64 {
        let count: usize = self.directions.iter().map(|z| z.values().len()).sum();
        let total: f64 = self.directions.iter().map(|z| z.values().iter().map(|v| v.abs()).sum::<f64>()).sum();
        total / count as f64
    }

    pub fn into_orbitals(self) -> Result<OrbitalSet, ManifoldError> {
        OrbitalSet::new(self.directions)
    }
}

fn combine(fields: &[Field], m: &DMatrix<f64>) -> Vec<Field> {
    let grid = fields[0].grid();
    (0..m.ncols())
        .into_par_iter()
        .map(|j| {
            let mut out = vec![0.0; grid.len()];
            for (k, f) in fields.iter().enumerate() {
                let c = m[(k, j)];
                if c == 0.0 {
                    continue;
                }
                for (o, v) in out.iter_mut().zip(f.values()) {
                    *o += c * v;
                }
            }
            Field::from_raw(grid, out)
        })
        .collect()
}

/// `N × N` matrix of inner products `<ψ_i, φ_j>`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    pub fn new(m: DMatrix<f64>) -> Self {
        GramMatrix(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn max_asymmetry(&self) -> f64 {
        let m = &self.0;
        let mut worst = 0.0f64;
        for i in 0..m.nrows() {
            for j in i + 1..m.ncols() {
                worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn max_identity_deviation(&self) -> f64 {
        let (off, diag) = self.identity_deviations();
        off.max(diag)
    }

    /// `(max |off-diagonal|, max |diagonal - 1|)`.
    pub fn identity_deviations(&self) -> (f64, f64) {
        let m = &self.0;
        let mut off = 0.0f64;
        let mut diag = 0.0f64;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if i == j {
                    diag = diag.max((m[(i, i)] - 1.0).abs());
                } else {
                    off = off.max(m[(i, j)].abs());
                }
            }
        }
        (off, diag)
    }
}

/// `<ΨᵀΦ>`.
pub fn gram(psi: &OrbitalSet, phi: &OrbitalSet) -> Result<GramMatrix, ManifoldError> {
    psi.check_compatible(phi)?;
    let n = psi.len();
    let w = psi.grid().weight();
    let entries: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|e| w * dot(psi.orbitals[e / n].values(), phi.orbitals[e % n].values()))
        .collect();
    Ok(GramMatrix(DMatrix::from_row_slice(n, n, &entries)))
}

/// `<WᵀW>` computed on the upper triangle and mirrored, so exactly symmetric.
pub(crate) fn gram_sym(fields: &[Field]) -> GramMatrix {
    let n = fields.len();
    let w = fields[0].grid().weight();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| w * dot(fields[i].values(), fields[j].values()))
        .collect();
    let mut m = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    GramMatrix(m)
}

fn sorted_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>), ManifoldError> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) || eig.eigenvectors.iter().any(|v| !v.is_finite()) {
        return Err(ManifoldError::NonFinite);
    }
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vecs.set_column(dst, &col);
    }
    Ok((vals, vecs))
}

/// Result of one orthonormalization together with the Gram matrix of its input.
#[derive(Debug, Clone)]
pub struct Orthonormalized {
    pub orbitals: OrbitalSet,
    pub input_gram: GramMatrix,
}

/// Cholesky-QR: `W = W̃ L^{-T}` where `<W̃ᵀW̃> = L Lᵀ`, falling back to
/// `W̃ G^{-1/2}` when the factorization fails.
pub fn orthonormalize(w: &OrbitalSet) -> Result<OrbitalSet, ManifoldError> {
    Ok(orthonormalize_with_gram(w)?.orbitals)
}

pub fn orthonormalize_with_gram(w: &OrbitalSet) -> Result<Orthonormalized, ManifoldError> {
    let g = gram_sym(&w.orbitals);
    let (first, cond) = orth_from_gram(w, g.matrix())?;
    let orbitals = if cond > REORTH_CONDITION {
        let g2 = gram_sym(&first.orbitals);
        let (second, _) = orth_from_gram(&first, g2.matrix())?;
        let deviation = second.orthonormality_error();
        if deviation > ORTHO_TOL {
            return Err(ManifoldError::NotOrthonormal { deviation });
        }
        second
    } else {
        first
    };
    Ok(Orthonormalized { orbitals, input_gram: g })
}

fn orth_from_gram(w: &OrbitalSet, g: &DMatrix<f64>) -> Result<(OrbitalSet, f64), ManifoldError> {
    let eigvals = g.symmetric_eigenvalues();
    if eigvals.iter().any(|v| !v.is_finite()) {
        return Err(ManifoldError::NonFinite);
    }
    let max = eigvals.max();
    let min = eigvals.min();
    if !(max > 0.0) || min < RANK_TOL * max {
        return Err(ManifoldError::Degenerate { ratio: if max > 0.0 { min / max } else { 0.0 } });
    }
    let cond = max / min;
    let n = g.nrows();
    let transform = match g.clone().cholesky() {
        Some(chol) => {
            let l = chol.l();
            match l.solve_lower_triangular(&DMatrix::identity(n, n)) {
                Some(linv) => linv.transpose(),
                None => inverse_sqrt(g, max)?,
            }
        }
        None => inverse_sqrt(g, max)?,
    };
    Ok((w.rotate(&transform), cond))
}

fn inverse_sqrt(g: &DMatrix<f64>, max: f64) -> Result<DMatrix<f64>, ManifoldError> {
    let (vals, vecs) = sorted_eigen(g)?;
    let floor = RANK_TOL * max;
    let d = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.max(floor).sqrt()));
    Ok(&vecs * d * vecs.transpose())
}

/// Full Stiefel gradient `HU - UΣ` with `Σ = <(HU)ᵀU>` (symmetrized).
pub fn stiefel_gradient(u: &OrbitalSet, hu: &OrbitalSet) -> Result<(SearchDirections, GramMatrix), ManifoldError> {
    let raw = gram(hu, u)?;
    let sigma = symmetrized(&raw)?;
    let us = u.rotate(sigma.matrix());
    let directions = hu
        .orbitals
        .par_iter()
        .zip(us.orbitals.par_iter())
        .map(|(h, s)| {
            let values = h.values().iter().zip(s.values()).map(|(a, b)| a - b).collect();
            Field::from_raw(h.grid(), values)
        })
        .collect();
    Ok((SearchDirections::new(directions), sigma))
}

fn symmetrized(g: &GramMatrix) -> Result<GramMatrix, ManifoldError> {
    let m = g.matrix();
    let scale = m.amax().max(1.0);
    let asymmetry = g.max_asymmetry();
    if asymmetry > SYMMETRY_TOL * scale {
        return Err(ManifoldError::Asymmetric { asymmetry });
    }
    Ok(GramMatrix((m + m.transpose()) * 0.5))
}

/// Diagonal-Σ residuals `z_i = H u_i - σ_ii u_i` with `σ_ii = <H u_i, u_i>`,
/// each computed from its own orbital only.
pub fn diagonal_residuals(u: &OrbitalSet, hu: &OrbitalSet) -> Result<(SearchDirections, Vec<f64>), ManifoldError> {
    u.check_compatible(hu)?;
    let w = u.grid().weight();
    let (directions, sigma): (Vec<Field>, Vec<f64>) = u
        .orbitals
        .par_iter()
        .zip(hu.orbitals.par_iter())
        .map(|(ui, hi)| {
            let s = w * dot(hi.values(), ui.values());
            let values = hi.values().iter().zip(ui.values()).map(|(a, b)| a - s * b).collect();
            (Field::from_raw(ui.grid(), values), s)
        })
        .unzip();
    Ok((SearchDirections::new(directions), sigma))
}

/// Output of [`subspace_rotate`].
#[derive(Debug, Clone)]
pub struct SubspaceRotation {
    pub orbitals: OrbitalSet,
    /// Orthogonal `P` with `Pᵀ Σ P = Γ`.
    pub rotation: DMatrix<f64>,
    /// Eigenvalues of Σ in ascending order.
    pub eigenvalues: DVector<f64>,
}

/// Rotates `W` onto the eigenbasis of Σ. Eigenvalues ascend and each
/// eigenvector's first entry of magnitude above 1e-12 is positive.
pub fn subspace_rotate(w: &OrbitalSet, sigma: &GramMatrix) -> Result<SubspaceRotation, ManifoldError> {
    if sigma.matrix().nrows() != w.len() {
        return Err(ManifoldError::CountMismatch { left: w.len(), right: sigma.matrix().nrows() });
    }
    let sym = symmetrized(sigma)?;
    let (eigenvalues, rotation) = sorted_eigen(sym.matrix())?;
    Ok(SubspaceRotation { orbitals: w.rotate(&rotation), rotation, eigenvalues })
}

/// `(max off-diagonal, max |diag - 1|)` of `<W̃ᵀW̃>`.
pub fn near_identity_diagnostic(w: &OrbitalSet) -> (f64, f64) {
    gram_sym(&w.orbitals).identity_deviations()
}
