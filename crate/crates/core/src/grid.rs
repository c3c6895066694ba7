//! Uniform cell-centered grids on rectangles, the Neumann Laplacian, and
//! lumped L² inner products.
//!
//! Cells are numbered row-major: in 2-D the cell `(ix, iy)` has index
//! `iy * nx + ix`. No boundary nodes are stored; the homogeneous Neumann
//! condition enters only through the stencil (a missing neighbor is a
//! reflected ghost cell and contributes no flux).

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A 1-D interval or 2-D rectangle `[0, L₀] × [0, L₁]` split into uniform cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    dim: usize,
    lengths: [f64; 2],
    cells: [usize; 2],
}

impl Domain {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths[..self.dim]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells[..self.dim]
    }

    pub fn cell_size(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.cells[axis] as f64
    }

    pub fn cell_sizes(&self) -> [f64; 2] {
        [self.cell_size(0), if self.dim == 2 { self.cell_size(1) } else { 1.0 }]
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.cell_size(a)).product()
    }

    /// Measure of the whole domain.
    pub fn volume(&self) -> f64 {
        self.lengths().iter().product()
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.cells().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell center coordinates; the second entry is 0 in 1-D.
    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let nx = self.cells[0];
        let (ix, iy) = (cell % nx, cell / nx);
        let h = self.cell_sizes();
        let y = if self.dim == 2 { (iy as f64 + 0.5) * h[1] } else { 0.0 };
        [(ix as f64 + 0.5) * h[0], y]
    }
}

/// Validates and builds a [`Domain`].
pub fn build_domain(dim: usize, lengths: &[f64], cells: &[usize]) -> Result<Domain> {
    if dim != 1 && dim != 2 {
        return Err(Error::InvalidDimension(dim));
    }
    if lengths.len() != dim || cells.len() != dim {
        return Err(Error::ShapeMismatch(alloc::format!(
            "expected {dim} lengths and cell counts, got {} and {}",
            lengths.len(),
            cells.len()
        )));
    }
    let mut out = Domain { dim, lengths: [1.0; 2], cells: [1; 2] };
    for axis in 0..dim {
        let (l, n) = (lengths[axis], cells[axis]);
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::NonpositiveLength { axis, value: l });
        }
        if n < 2 {
            return Err(Error::CellCountTooSmall { axis, cells: n });
        }
        out.lengths[axis] = l;
        out.cells[axis] = n;
    }
    Ok(out)
}

/// One real value per cell of a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    domain: Domain,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(domain: &Domain) -> Self {
        Self::constant(domain, 0.0)
    }

    pub fn constant(domain: &Domain, c: f64) -> Self {
        Field { domain: *domain, values: vec![c; domain.len()] }
    }

    pub fn from_fn(domain: &Domain, mut f: impl FnMut([f64; 2]) -> f64) -> Self {
        let values = (0..domain.len()).map(|c| f(domain.cell_center(c))).collect();
        Field { domain: *domain, values }
    }

    pub fn from_values(domain: &Domain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "field has {} values, domain has {} cells",
                values.len(),
                domain.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "field",
                reason: alloc::format!("non-finite value in cell {i}"),
            });
        }
        Ok(Field { domain: *domain, values })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { domain: self.domain, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Pointwise `f(self, other)`; panics on a cell-count mismatch.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.len(), other.len());
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Field { domain: self.domain, values }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Lumped L² norm.
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum::<f64>() * self.domain.cell_volume())
    }
}

/// Lumped L² inner product `Σ f g |cell|`.
pub fn inner_product(f: &Field, g: &Field) -> Result<f64> {
    if f.domain != g.domain {
        return Err(Error::DomainMismatch);
    }
    Ok(dot(&f.values, &g.values) * f.domain.cell_volume())
}

/// Midpoint-rule integral over the domain.
pub fn integrate(f: &Field) -> f64 {
    f.values.iter().sum::<f64>() * f.domain.cell_volume()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Square sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    symmetric: bool,
    /// Rows sum to zero; applied in flux form `Σ aᵢⱼ (xⱼ − xᵢ)` so that
    /// constants are annihilated exactly.
    zero_row_sums: bool,
}

impl SparseOperator {
    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Entries `(col, value)` of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    /// Largest `|i − j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// `out = A x`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (i, o) in out.iter_mut().enumerate() {
            *o = if self.zero_row_sums {
                self.row(i).filter(|&(j, _)| j != i).map(|(j, v)| v * (x[j] - x[i])).sum()
            } else {
                self.row(i).map(|(j, v)| v * x[j]).sum()
            };
        }
    }

    pub fn apply(&self, f: &Field) -> Field {
        let mut out = Field::zeros(f.domain());
        self.apply_into(f.values(), out.values_mut());
        out
    }

    /// Exact structural and numerical symmetry check.
    pub fn check_symmetry(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }
}

/// Cell-centered five-point (three-point in 1-D) Laplacian with reflected
/// ghost cells. Symmetric, negative semidefinite, zero row and column sums.
pub fn assemble_neumann_laplacian(domain: &Domain) -> SparseOperator {
    let n = domain.len();
    let nx = domain.cells[0];
    let ny = if domain.dim == 2 { domain.cells[1] } else { 1 };
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(5 * n);
    let mut vals = Vec::with_capacity(5 * n);
    row_ptr.push(0);
    let cx = 1.0 / (domain.cell_size(0) * domain.cell_size(0));
    let cy = if domain.dim == 2 { 1.0 / (domain.cell_size(1) * domain.cell_size(1)) } else { 0.0 };
    for iy in 0..ny {
        for ix in 0..nx {
            let i = iy * nx + ix;
            // increasing column order; a missing neighbor is a reflected ghost
            let neighbors = [
                (iy > 0, i.wrapping_sub(nx), cy),
                (ix > 0, i.wrapping_sub(1), cx),
                (true, i, 0.0),
                (ix + 1 < nx, i + 1, cx),
                (iy + 1 < ny, i + nx, cy),
            ];
            let diag: f64 = -neighbors.iter().filter(|e| e.0 && e.1 != i).map(|e| e.2).sum::<f64>();
            for &(present, j, c) in &neighbors {
                if present {
                    cols.push(j);
                    vals.push(if j == i { diag } else { c });
                }
            }
            row_ptr.push(cols.len());
        }
    }
    SparseOperator { n, row_ptr, cols, vals, symmetric: true, zero_row_sums: true }
}
