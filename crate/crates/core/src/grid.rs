//! Uniform real-space meshes with zero-Dirichlet boundaries.
//!
//! A [`Grid`] stores only interior points. Point `k` along an axis of length
//! `L` with `n` interior points sits at `(k + 1) * h` where `h = L / (n + 1)`;
//! both box faces carry the implicit boundary value zero. Fields are stored
//! lexicographically with the last axis varying fastest.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

/// Below this many points the stencil and reductions run serially.
const PAR_THRESHOLD: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid dimension must be 1, 2 or 3, got {0}")]
    InvalidDimension(usize),
    #[error("expected {expected} per-axis values, got {got}")]
    AxisCount { expected: usize, got: usize },
    #[error("extent along axis {axis} must be positive and finite, got {value}")]
    NonPositiveExtent { axis: usize, value: f64 },
    #[error("axis {axis} has zero interior points")]
    ZeroPoints { axis: usize },
    #[error("total point count overflows the index type")]
    Overflow,
    #[error("fields live on different grids")]
    Mismatch,
    #[error("field has {got} values but the grid has {expected} points")]
    LengthMismatch { expected: usize, got: usize },
    #[error("field value at point {index} is not finite")]
    NonFinite { index: usize },
    #[error("target grid is not the uniform refinement of the source grid")]
    NotRefinement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    extents: Vec<f64>,
    points: Vec<usize>,
    spacing: Vec<f64>,
    weight: f64,
    len: usize,
}

impl Grid {
    /// Builds a grid; `extents` and `points_per_axis` must both have
    /// `dimension` entries.
    pub fn new(dimension: usize, extents: &[f64], points_per_axis: &[usize]) -> Result<Self, GridError> {
        if !(1..=3).contains(&dimension) {
            return Err(GridError::InvalidDimension(dimension));
        }
        for got in [extents.len(), points_per_axis.len()] {
            if got != dimension {
                return Err(GridError::AxisCount { expected: dimension, got });
            }
        }
        let mut len = 1usize;
        for (axis, (&l, &n)) in extents.iter().zip(points_per_axis).enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(GridError::NonPositiveExtent { axis, value: l });
            }
            if n == 0 {
                return Err(GridError::ZeroPoints { axis });
            }
            len = len.checked_mul(n).ok_or(GridError::Overflow)?;
        }
        // Every later index computation adds at most one stride to a valid index.
        if len > isize::MAX as usize / 2 {
            return Err(GridError::Overflow);
        }
        let spacing: Vec<f64> = extents
            .iter()
            .zip(points_per_axis)
            .map(|(&l, &n)| l / (n as f64 + 1.0))
            .collect();
        let weight = spacing.iter().product();
        Ok(Grid {
            extents: extents.to_vec(),
            points: points_per_axis.to_vec(),
            spacing,
            weight,
            len,
        })
    }

    pub fn dimension(&self) -> usize {
        self.points.len()
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents
    }

    pub fn points_per_axis(&self) -> &[usize] {
        &self.points
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Quadrature weight `h_1 * ... * h_d` attached to every interior point.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Total number of interior points `N_g`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Axis sizes padded to three axes with leading ones.
    pub(crate) fn dims3(&self) -> [usize; 3] {
        let mut dims = [1usize; 3];
        let off = 3 - self.dimension();
        dims[off..].copy_from_slice(&self.points);
        dims
    }

    /// `1/h^2` per padded axis, zero on padding axes.
    pub(crate) fn inv_h2_3(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        let off = 3 - self.dimension();
        for (k, h) in self.spacing.iter().enumerate() {
            out[off + k] = 1.0 / (h * h);
        }
        out
    }

    /// Multi-index of a flat point index.
    pub fn multi_index(&self, mut index: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dimension()];
        for k in (0..self.dimension()).rev() {
            idx[k] = index % self.points[k];
            index /= self.points[k];
        }
        idx
    }

    /// Physical coordinates (bohr) of a flat point index.
    pub fn coords(&self, index: usize) -> Vec<f64> {
        self.multi_index(index)
            .into_iter()
            .zip(&self.spacing)
            .map(|(i, h)| (i as f64 + 1.0) * h)
            .collect()
    }

    /// Whether a physical position lies in the closed box `[0, L]^d`.
    pub fn contains(&self, position: &[f64]) -> bool {
        position.len() == self.dimension()
            && position
                .iter()
                .zip(&self.extents)
                .all(|(&x, &l)| x.is_finite() && (0.0..=l).contains(&x))
    }

    /// Uniform bisection of every cell: `n -> 2n + 1` points per axis.
    pub fn refine_uniform(&self) -> Result<Grid, GridError> {
        let points = self
            .points
            .iter()
            .map(|&n| n.checked_mul(2).and_then(|m| m.checked_add(1)).ok_or(GridError::Overflow))
            .collect::<Result<Vec<_>, _>>()?;
        Grid::new(self.dimension(), &self.extents, &points)
    }

    pub fn is_refinement_of(&self, coarse: &Grid) -> bool {
        self.dimension() == coarse.dimension()
            && self.extents == coarse.extents
            && self.points.iter().zip(&coarse.points).all(|(&f, &c)| f == 2 * c + 1)
    }
}

/// A real scalar per interior grid point.
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl PartialEq for Field {
    fn eq(&self, other: &Self) -> bool {
        same_grid(&self.grid, &other.grid) && self.values == other.values
    }
}

pub(crate) fn same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Field { grid: Arc::clone(grid), values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: &Arc<Grid>, value: f64) -> Self {
        Field { grid: Arc::clone(grid), values: vec![value; grid.len()] }
    }

    /// Wraps raw values, checking length and finiteness.
    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Field { grid: Arc::clone(grid), values })
    }

    /// Samples `f` at the physical coordinates of every point.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|p| f(&grid.coords(p))).collect();
        Field { grid: Arc::clone(grid), values }
    }

    /// Internal constructor for values known to be well formed.
    pub(crate) fn from_raw(grid: &Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Field { grid: Arc::clone(grid), values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_same_grid(&self, other: &Field) -> Result<(), GridError> {
        if same_grid(&self.grid, &other.grid) {
            Ok(())
        } else {
            Err(GridError::Mismatch)
        }
    }

    /// `self + alpha * x`.
    pub fn add_scaled(&self, alpha: f64, x: &Field) -> Result<Field, GridError> {
        self.check_same_grid(x)?;
        let values = self.values.iter().zip(&x.values).map(|(a, b)| a + alpha * b).collect();
        Ok(Field::from_raw(&self.grid, values))
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        Field::from_raw(&self.grid, self.values.iter().map(|v| alpha * v).collect())
    }

    /// Entrywise maximum absolute value.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Fixed-order dot product of two slices.
///
/// Eight interleaved partial sums are combined pairwise; the traversal order
/// depends only on the slice length, never on the thread count.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    for (k, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[k] += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Fixed-order sum, same traversal as [`dot`].
pub fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.chunks_exact(8);
    let rem = chunks.remainder();
    for x in chunks {
        for k in 0..8 {
            acc[k] += x[k];
        }
    }
    for (k, x) in rem.iter().enumerate() {
        acc[k] += x;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Discrete `L^2` inner product: `weight * sum_p f(p) g(p)`.
pub fn inner_product(f: &Field, g: &Field) -> Result<f64, GridError> {
    f.check_same_grid(g)?;
    Ok(f.grid.weight() * dot(&f.values, &g.values))
}

/// Second-order central-difference Laplacian with zero-Dirichlet boundary.
pub fn apply_laplacian(field: &Field) -> Field {
    let grid = &field.grid;
    let dims = grid.dims3();
    let inv_h2 = grid.inv_h2_3();
    let f = &field.values;
    let (n1, n2) = (dims[1], dims[2]);
    let strides = [n1 * n2, n2, 1];
    let mut out = vec![0.0; f.len()];

    let row = |r: usize, dst: &mut [f64]| {
        let i0 = r / n1;
        let i1 = r % n1;
        let base = r * n2;
        for (i2, slot) in dst.iter_mut().enumerate() {
            let p = base + i2;
            let c = f[p];
            let idx = [i0, i1, i2];
            let mut acc = 0.0;
            for a in 0..3 {
                if inv_h2[a] == 0.0 {
                    continue;
                }
                let s = strides[a];
                let left = if idx[a] > 0 { f[p - s] } else { 0.0 };
                let right = if idx[a] + 1 < dims[a] { f[p + s] } else { 0.0 };
                acc += (left - 2.0 * c + right) * inv_h2[a];
            }
            *slot = acc;
        }
    };

    if f.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(n2).enumerate().for_each(|(r, dst)| row(r, dst));
    } else {
        out.chunks_mut(n2).enumerate().for_each(|(r, dst)| row(r, dst));
    }
    Field::from_raw(grid, out)
}

/// Multilinear prolongation onto the uniform refinement of the field's grid.
///
/// Fine points that coincide with coarse points copy the coarse value.
/// Midpoints average their two coarse neighbours; the two fine points next
/// to each boundary face are extrapolated linearly from the two nearest
/// coarse points, so constants and affine functions are reproduced exactly.
pub fn prolongate(coarse: &Field, fine: &Arc<Grid>) -> Result<Field, GridError> {
    let cg = coarse.grid();
    if !fine.is_refinement_of(cg) {
        return Err(GridError::NotRefinement);
    }
    let off = 3 - cg.dimension();
    let mut dims = cg.dims3();
    let mut data = coarse.values.clone();
    for axis in off..3 {
        let (new_data, new_dims) = expand_axis(&data, dims, axis);
        data = new_data;
        dims = new_dims;
    }
    debug_assert_eq!(data.len(), fine.len());
    Ok(Field::from_raw(fine, data))
}

fn expand_axis(data: &[f64], dims: [usize; 3], axis: usize) -> (Vec<f64>, [usize; 3]) {
    let n = dims[axis];
    let m = 2 * n + 1;
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut new_dims = dims;
    new_dims[axis] = m;
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for q in 0..inner {
            let src = |k: usize| data[(o * n + k) * inner + q];
            for j in 0..m {
                let v = if j % 2 == 1 {
                    src((j - 1) / 2)
                } else if j == 0 {
                    if n >= 2 { 1.5 * src(0) - 0.5 * src(1) } else { src(0) }
                } else if j == 2 * n {
                    if n >= 2 { 1.5 * src(n - 1) - 0.5 * src(n - 2) } else { src(n - 1) }
                } else {
                    0.5 * (src(j / 2 - 1) + src(j / 2))
                };
                out[(o * m + j) * inner + q] = v;
            }
        }
    }
    (out, new_dims)
}

/// Injection of a fine field back onto the coarse points it refines.
pub fn restrict_injection(fine: &Field, coarse: &Arc<Grid>) -> Result<Field, GridError> {
    if !fine.grid().is_refinement_of(coarse) {
        return Err(GridError::NotRefinement);
    }
    let fg = fine.grid();
    let values = (0..coarse.len())
        .map(|p| {
            let idx = coarse.multi_index(p);
            let mut flat = 0usize;
            for (k, i) in idx.iter().enumerate() {
                flat = flat * fg.points_per_axis()[k] + (2 * i + 1);
            }
            fine.values[flat]
        })
        .collect();
    Ok(Field::from_raw(coarse, values))
}
