//! Conjugate-gradient solve of `-Δ_h v = b` on a zero-Dirichlet grid,
//! preconditioned by a sine-transform solve of the same operator.

use rayon::prelude::*;
use thiserror::Error;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};

use crate::grid::{apply_laplacian, dot, Field, Grid};


#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoissonError {
    #[error("conjugate gradient stalled at relative residual {residual:e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("right-hand side and initial guess live on different grids")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgSettings {
    /// Target for `||b + Δ_h v|| / ||b||`.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Apply the sine-transform preconditioner.
    pub preconditioned: bool,
}

impl Default for CgSettings {
    fn default() -> Self {
        CgSettings { rel_tol: 1e-10, max_iter: 5000, preconditioned: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

fn neg_laplacian(v: &Field) -> Vec<f64> {
    let mut out = apply_laplacian(v).into_values();
    out.iter_mut().for_each(|x| *x = -*x);
    out
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    if y.len() >= 4096 {
        y.par_iter_mut().zip(x.par_iter()).for_each(|(a, b)| *a += alpha * b);
    } else {
        y.iter_mut().zip(x).for_each(|(a, b)| *a += alpha * b);
    }
}

/// Solves `-Δ_h v = rhs`. The recursive residual is verified against the
/// true residual before returning; on disagreement the iteration restarts
/// from the current iterate.
pub fn solve_neg_laplacian(
    rhs: &Field,
    guess: Option<&Field>,
    settings: CgSettings,
) -> Result<(Field, CgStats), PoissonError> {
    let grid = rhs.grid();
    let b = rhs.values();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok((Field::zeros(grid), CgStats { iterations: 0, rel_residual: 0.0 }));
    }
    let mut v = match guess {
        Some(g) => {
            g.check_same_grid(rhs).map_err(|_| PoissonError::GridMismatch)?;
            g.clone()
        }
        None => Field::zeros(grid),
    };
    let target = settings.rel_tol * b_norm;
    let precond = settings.preconditioned.then(|| SineSolver::new(grid));
    let apply_m = |r: &[f64]| match &precond {
        Some(m) => m.solve(r),
        None => r.to_vec(),
    };
    let mut iterations = 0usize;
    loop {
        let av = neg_laplacian(&v);
        let mut r: Vec<f64> = b.iter().zip(&av).map(|(x, y)| x - y).collect();
        let r_norm = dot(&r, &r).sqrt();
        if r_norm <= target {
            return Ok((v, CgStats { iterations, rel_residual: r_norm / b_norm }));
        }
        if iterations >= settings.max_iter {
            return Err(PoissonError::NotConverged { iterations, residual: r_norm / b_norm });
        }
        let z = apply_m(&r);
        let mut rz = dot(&r, &z);
        let mut p = Field::from_raw(grid, z);
        while iterations < settings.max_iter {
            iterations += 1;
            let ap = neg_laplacian(&p);
            let pap = dot(p.values(), &ap);
            if !(pap > 0.0 && rz > 0.0) {
                break;
            }
            let alpha = rz / pap;
            axpy(v.values_mut(), alpha, p.values());
            axpy(&mut r, -alpha, &ap);
            if dot(&r, &r).sqrt() <= target {
                break;
            }
            let z = apply_m(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.values_mut().iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
        }
    }
}

/// Exact inverse of `-Δ_h` through the orthonormal discrete sine basis
/// `S_jk = sqrt(2/(n+1)) sin(π (j+1)(k+1)/(n+1))` along each axis.
struct SineSolver {
    dims: [usize; 3],
    /// Sine matrix per padded axis.
    basis: [Option<DMatrix<f64>>; 3],
    /// Eigenvalues of the 1D operator per padded axis.
    eigen: [Vec<f64>; 3],
}

impl SineSolver {
    fn new(grid: &Grid) -> Self {
        let dims = grid.dims3();
        let inv_h2 = grid.inv_h2_3();
        let mut basis: [Option<DMatrix<f64>>; 3] = Default::default();
        let mut eigen: [Vec<f64>; 3] = Default::default();
        for a in 0..3 {
            let n = dims[a];
            if inv_h2[a] == 0.0 {
                eigen[a] = vec![0.0; n];
                continue;
            }
            let m = (n + 1) as f64;
            let scale = (2.0 / m).sqrt();
            basis[a] = Some(DMatrix::from_fn(n, n, |j, k| scale * (PI * ((j + 1) * (k + 1)) as f64 / m).sin()));
            eigen[a] = (1..=n).map(|k| 2.0 * inv_h2[a] * (1.0 - (PI * k as f64 / m).cos())).collect();
        }
        SineSolver { dims, basis, eigen }
    }

    /// Applies `S` along every padded axis. A contiguous block of `n`
    /// slices of length `stride` is the column-major `stride × n` matrix
    /// `X`, and the transform is `X S` since `S` is symmetric.
    fn transform(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for a in 0..3 {
            let Some(s) = &self.basis[a] else { continue };
            let n = self.dims[a];
            let stride: usize = self.dims[a + 1..].iter().product();
            let mut out = vec![0.0; cur.len()];
            if stride == 1 {
                let m = cur.len() / n;
                let y = DMatrixView::from_slice(&cur, n, m);
                DMatrixViewMut::from_slice(&mut out, n, m).gemm(1.0, s, &y, 0.0);
            } else {
                for (src, dst) in cur.chunks(n * stride).zip(out.chunks_mut(n * stride)) {
                    let y = DMatrixView::from_slice(src, stride, n);
                    DMatrixViewMut::from_slice(dst, stride, n).gemm(1.0, &y, s, 0.0);
                }
            }
            cur = out;
        }
        cur
    }

    fn solve(&self, r: &[f64]) -> Vec<f64> {
        let mut c = self.transform(r);
        let [n0, n1, n2] = self.dims;
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                let l01 = self.eigen[0][i0] + self.eigen[1][i1];
                for i2 in 0..n2 {
                    c[(i0 * n1 + i1) * n2 + i2] /= l01 + self.eigen[2][i2];
                }
            }
        }
        self.transform(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn zero_rhs_gives_zero() {
        let grid = Arc::new(Grid::new(3, &[4.0; 3], &[5; 3]).unwrap());
        let (v, stats) = solve_neg_laplacian(&Field::zeros(&grid), None, CgSettings::default()).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
        assert_eq!(stats.iterations, 0);
    }

    /// The discrete sine product mode is an exact eigenvector of -Δ_h.
    #[test]
    fn sine_mode_solved_against_closed_form() {
        let l = [3.0, 4.0, 5.0];
        let n = [11usize, 13, 9];
        let grid = Arc::new(Grid::new(3, &l, &n).unwrap());
        let h = grid.spacing().to_vec();
        let mode = |x: &[f64]| (PI * x[0] / l[0]).sin() * (2.0 * PI * x[1] / l[1]).sin() * (PI * x[2] / l[2]).sin();
        let lam: f64 = [(1.0, 0), (2.0, 1), (1.0, 2)]
            .iter()
            .map(|&(k, a)| (2.0 / (h[a] * h[a])) * (1.0 - (k * PI * h[a] / l[a]).cos()))
            .sum();
        let rhs = Field::from_fn(&grid, mode);
        let (v, _) = solve_neg_laplacian(&rhs, None, CgSettings::default()).unwrap();
        for (a, b) in v.values().iter().zip(rhs.values()) {
            assert!((a - b / lam).abs() < 1e-9 * (1.0 / lam));
        }
    }

    #[test]
    fn true_residual_meets_tolerance_and_warm_start_helps() {
        let grid = Arc::new(Grid::new(3, &[6.0; 3], &[15; 3]).unwrap());
        let rhs = Field::from_fn(&grid, |x| {
            let r2: f64 = x.iter().map(|c| (c - 3.0).powi(2)).sum();
            (-r2).exp()
        });
        let (v, cold) = solve_neg_laplacian(&rhs, None, CgSettings::default()).unwrap();
        let av = neg_laplacian(&v);
        let res: Vec<f64> = rhs.values().iter().zip(&av).map(|(a, b)| a - b).collect();
        let rel = dot(&res, &res).sqrt() / dot(rhs.values(), rhs.values()).sqrt();
        assert!(rel <= 1e-10, "{rel}");
        let (_, warm) = solve_neg_laplacian(&rhs, Some(&v), CgSettings::default()).unwrap();
        assert!(warm.iterations < cold.iterations);
    }

    #[test]
    fn preconditioner_is_the_exact_inverse() {
        for (d, n) in [(1usize, vec![17usize]), (2, vec![6, 9]), (3, vec![5, 7, 4])] {
            let grid = Arc::new(Grid::new(d, &vec![3.0; d], &n).unwrap());
            let x = Field::from_fn(&grid, |p| p.iter().enumerate().map(|(i, c)| ((i + 2) as f64 * c).sin()).sum());
            let b = neg_laplacian(&x);
            let y = SineSolver::new(&grid).solve(&b);
            for (u, v) in x.values().iter().zip(&y) {
                assert!((u - v).abs() < 1e-11, "{d}D: {u} vs {v}");
            }
        }
    }

    #[test]
    fn plain_and_preconditioned_agree() {
        let grid = Arc::new(Grid::new(3, &[6.0; 3], &[11; 3]).unwrap());
        let rhs = Field::from_fn(&grid, |x| (-(x[0] - 2.0).powi(2) - (x[1] - 3.0).powi(2) - x[2]).exp());
        let plain = CgSettings { preconditioned: false, ..CgSettings::default() };
        let (a, sa) = solve_neg_laplacian(&rhs, None, plain).unwrap();
        let (b, sb) = solve_neg_laplacian(&rhs, None, CgSettings::default()).unwrap();
        assert!(sb.iterations <= 3 && sb.iterations < sa.iterations, "{sb:?} {sa:?}");
        let scale = a.max_abs();
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn iteration_cap_reported() {
        let grid = Arc::new(Grid::new(3, &[6.0; 3], &[15; 3]).unwrap());
        let rhs = Field::from_fn(&grid, |x| x[0] * x[1]);
        let err = solve_neg_laplacian(&rhs, None, CgSettings { rel_tol: 1e-14, max_iter: 3, preconditioned: false }).unwrap_err();
        assert!(matches!(err, PoissonError::NotConverged { iterations: 3, .. }));
    }
}
