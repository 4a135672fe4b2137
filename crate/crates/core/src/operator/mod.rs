//! Discrete Hamiltonian `c_lap * (-Laplacian_h) + diag(V) + shift * I`,
//! orbital blocks, and the inner products the scheme is built from.
//!
//! The mass matrix of the finite-difference discretization is `h^d * I`, so
//! `(u, v) = h^d * u.v` and `(u, v)_a = h^d * u.(H v)`.

mod green;
mod sparse;

pub use green::{apply_green, Backend, GreenSolver, SolverConfig};
pub use sparse::CsrMatrix;

use crate::error::{FlowError, Result};
use crate::grid::{eval_potential, Potential, TensorGrid};
use crate::smallmat::DenseMatrix;

/// `N_g x N` block of orbitals, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitalSet {
    n_nodes: usize,
    n_orbitals: usize,
    weight: f64,
    data: Vec<f64>,
}

impl OrbitalSet {
    pub fn zeros(n_nodes: usize, n_orbitals: usize, weight: f64) -> Self {
        Self {
            n_nodes,
            n_orbitals,
            weight,
            data: vec![0.0; n_nodes * n_orbitals],
        }
    }

    /// Builds a block from column-major data.
    pub fn from_column_major(n_nodes: usize, n_orbitals: usize, weight: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_nodes * n_orbitals {
            return Err(FlowError::Shape(format!(
                "{} values for a {n_nodes}x{n_orbitals} orbital block",
                data.len()
            )));
        }
        Ok(Self {
            n_nodes,
            n_orbitals,
            weight,
            data,
        })
    }

    pub fn from_columns(columns: &[Vec<f64>], weight: f64) -> Result<Self> {
        let n_nodes = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != n_nodes) {
            return Err(FlowError::Shape("columns differ in length".into()));
        }
        Ok(Self {
            n_nodes,
            n_orbitals: columns.len(),
            weight,
            data: columns.concat(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_orbitals(&self) -> usize {
        self.n_orbitals
    }

    /// Quadrature weight `h^d` of the L2 inner product.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_nodes..(j + 1) * self.n_nodes]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n_nodes..(j + 1) * self.n_nodes]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_nodes.max(1)).take(self.n_orbitals)
    }

    /// Columns `range` as a new block.
    pub fn select(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            n_nodes: self.n_nodes,
            n_orbitals: range.len(),
            weight: self.weight,
            data: self.data[range.start * self.n_nodes..range.end * self.n_nodes].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_conformable(&self, other: &Self) -> Result<()> {
        if self.n_nodes != other.n_nodes {
            return Err(FlowError::Shape(format!(
                "orbital blocks live on {} and {} nodes",
                self.n_nodes, other.n_nodes
            )));
        }
        if (self.weight - other.weight).abs() > 1e-14 * self.weight.abs() {
            return Err(FlowError::Shape(format!(
                "orbital blocks carry different mass weights {} and {}",
                self.weight, other.weight
            )));
        }
        Ok(())
    }

    /// `<self, other>` with entries `(u_i, v_j) = h^d * u_i . v_j`.
    pub fn inner(&self, other: &Self) -> Result<DenseMatrix> {
        self.check_conformable(other)?;
        let mut m = DenseMatrix::zeros(self.n_orbitals, other.n_orbitals);
        let same = std::ptr::eq(self, other);
        for i in 0..self.n_orbitals {
            let a = self.column(i);
            let start = if same { i } else { 0 };
            for j in start..other.n_orbitals {
                let v = self.weight * dot(a, other.column(j));
                m[(i, j)] = v;
                if same {
                    m[(j, i)] = v;
                }
            }
        }
        Ok(m)
    }

    /// L2 norm of every column.
    pub fn column_norms(&self) -> Vec<f64> {
        self.columns().map(|c| (self.weight * dot(c, c)).sqrt()).collect()
    }

    /// Block L2 (Frobenius) norm `sqrt(tr <U, U>)`.
    pub fn norm(&self) -> f64 {
        (self.weight * dot(&self.data, &self.data)).sqrt()
    }

    /// `self * coeffs`, i.e. column `j` is `sum_k u_k coeffs[k][j]`.
    pub fn mul_matrix(&self, coeffs: &DenseMatrix) -> Result<Self> {
        let mut out = Self::zeros(self.n_nodes, coeffs.cols(), self.weight);
        out.accumulate(self, coeffs)?;
        Ok(out)
    }

    /// `self += other * coeffs`.
    pub fn accumulate(&mut self, other: &Self, coeffs: &DenseMatrix) -> Result<()> {
        if other.n_orbitals != coeffs.rows() || self.n_orbitals != coeffs.cols() {
            return Err(FlowError::Shape(format!(
                "cannot combine {} orbitals with a {}x{} matrix into {} orbitals",
                other.n_orbitals,
                coeffs.rows(),
                coeffs.cols(),
                self.n_orbitals
            )));
        }
        self.check_conformable(other)?;
        let n = self.n_nodes;
        for j in 0..self.n_orbitals {
            let dst = &mut self.data[j * n..(j + 1) * n];
            for k in 0..other.n_orbitals {
                let c = coeffs[(k, j)];
                if c != 0.0 {
                    axpy(c, other.column(k), dst);
                }
            }
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_conformable(other)?;
        if self.n_orbitals != other.n_orbitals {
            return Err(FlowError::Shape("orbital counts differ".into()));
        }
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o -= b;
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `||I - <U, U>||_F`.
    pub fn orthogonality_error(&self) -> f64 {
        self.inner(self)
            .map(|g| g.distance_to_identity())
            .unwrap_or(f64::INFINITY)
    }
}

thread_local! {
    static ORTHONORMALIZATIONS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Number of [`modified_gram_schmidt`] calls made on the current thread.
pub fn orthonormalization_count() -> usize {
    ORTHONORMALIZATIONS.with(|c| c.get())
}

/// Orthonormalizes the columns of `u` in the L2 inner product (two passes of
/// modified Gram-Schmidt). Fails if a column loses more than `1 - 1e-8` of
/// its norm to the previous ones.
pub fn modified_gram_schmidt(u: &mut OrbitalSet) -> Result<()> {
    ORTHONORMALIZATIONS.with(|c| c.set(c.get() + 1));
    let n = u.n_nodes;
    let w = u.weight;
    for j in 0..u.n_orbitals {
        let original = (w * dot(u.column(j), u.column(j))).sqrt();
        let (done, rest) = u.data.split_at_mut(j * n);
        let col = &mut rest[..n];
        for _ in 0..2 {
            for prev in done.chunks_exact(n) {
                let c = w * dot(prev, col);
                axpy(-c, prev, col);
            }
        }
        let norm = (w * dot(col, col)).sqrt();
        if !(norm > 1e-8 * original) || norm == 0.0 {
            return Err(FlowError::RankDeficient(format!(
                "column {j} is numerically dependent on the previous ones"
            )));
        }
        col.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Energy `E(U) = 0.5 tr <U, U>_a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    /// Energy of the shifted operator.
    pub raw: f64,
    /// `raw - 0.5 * N * shift`.
    pub shift_corrected: f64,
}

/// Sparse symmetric Hamiltonian on a tensor grid.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    grid: TensorGrid,
    matrix: CsrMatrix,
    potential: Vec<f64>,
    c_lap: f64,
    shift: f64,
}

impl Hamiltonian {
    /// Assembles `c_lap * (-Laplacian_h) + diag(V) + shift * I` with the
    /// second-order (2d+1)-point stencil.
    pub fn assemble(grid: &TensorGrid, pot: &Potential, c_lap: f64, shift: f64) -> Result<Self> {
        let potential = eval_potential(grid, pot)?;
        Self::from_potential_values(grid, potential, c_lap, shift)
    }

    pub fn from_potential_values(
        grid: &TensorGrid,
        potential: Vec<f64>,
        c_lap: f64,
        shift: f64,
    ) -> Result<Self> {
        if potential.len() != grid.n_nodes() {
            return Err(FlowError::Shape(format!(
                "{} potential values for {} nodes",
                potential.len(),
                grid.n_nodes()
            )));
        }
        if !(c_lap.is_finite() && c_lap > 0.0 && shift.is_finite()) {
            return Err(FlowError::Config(format!(
                "need c_lap > 0 and a finite shift, got c_lap = {c_lap}, shift = {shift}"
            )));
        }
        let dim = grid.dim();
        let n = grid.n_nodes();
        let inv_h2: Vec<f64> = grid.spacing().iter().map(|h| c_lap / (h * h)).collect();
        let centre: f64 = 2.0 * inv_h2.iter().sum::<f64>();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n * (2 * dim + 1));
        let mut vals = Vec::with_capacity(n * (2 * dim + 1));
        row_ptr.push(0);
        #[allow(clippy::needless_range_loop)]
        for j in 0..n {
            let idx = grid.multi_index(j);
            // Columns in ascending order: lower neighbours from the slowest
            // axis inward, the centre, then upper neighbours.
            for axis in 0..dim {
                if idx[axis] > 0 {
                    cols.push(j - grid.stride(axis));
                    vals.push(-inv_h2[axis]);
                }
            }
            cols.push(j);
            vals.push(centre + potential[j] + shift);
            for axis in (0..dim).rev() {
                if idx[axis] + 1 < grid.shape()[axis] {
                    cols.push(j + grid.stride(axis));
                    vals.push(-inv_h2[axis]);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            grid: grid.clone(),
            matrix: CsrMatrix::new(n, row_ptr, cols, vals),
            potential,
            c_lap,
            shift,
        })
    }

    pub fn grid(&self) -> &TensorGrid {
        &self.grid
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn c_lap(&self) -> f64 {
        self.c_lap
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn mass_weight(&self) -> f64 {
        self.grid.mass_weight()
    }

    /// Half-width of the stencil in flat indices.
    pub fn bandwidth(&self) -> usize {
        if self.grid.dim() == 0 {
            0
        } else {
            self.grid.stride(0)
        }
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.mul_vec(x, y);
    }

    pub fn apply_block(&self, u: &OrbitalSet) -> Result<OrbitalSet> {
        if u.n_nodes() != self.n_nodes() {
            return Err(FlowError::Shape(format!(
                "operator has {} nodes, block has {}",
                self.n_nodes(),
                u.n_nodes()
            )));
        }
        let mut out = OrbitalSet::zeros(u.n_nodes(), u.n_orbitals(), u.weight());
        for j in 0..u.n_orbitals() {
            self.matrix.mul_vec(u.column(j), out.column_mut(j));
        }
        Ok(out)
    }

    /// Empty block with this grid's mass weight.
    pub fn zeros(&self, n_orbitals: usize) -> OrbitalSet {
        OrbitalSet::zeros(self.n_nodes(), n_orbitals, self.mass_weight())
    }

    /// Gershgorin enclosure `[lo, hi]` of the spectrum.
    pub fn gershgorin_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.n_nodes() {
            let (cols, vals) = self.matrix.row(i);
            let mut diag = 0.0;
            let mut radius = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                if *c == i {
                    diag = *v;
                } else {
                    radius += v.abs();
                }
            }
            lo = lo.min(diag - radius);
            hi = hi.max(diag + radius);
        }
        (lo, hi)
    }
}

/// `<A, B>` in L2.
pub fn inner_l2(a: &OrbitalSet, b: &OrbitalSet) -> Result<DenseMatrix> {
    a.inner(b)
}

/// `<A, B>_a = h^d A^T H B`.
pub fn inner_a(a: &OrbitalSet, b: &OrbitalSet, h: &Hamiltonian) -> Result<DenseMatrix> {
    a.inner(&h.apply_block(b)?)
}

/// `E(U) = 0.5 tr <U, U>_a`, reported with and without the shift.
pub fn energy(u: &OrbitalSet, h: &Hamiltonian) -> Result<Energy> {
    if u.n_nodes() != h.n_nodes() {
        return Err(FlowError::Shape(format!(
            "operator has {} nodes, block has {}",
            h.n_nodes(),
            u.n_nodes()
        )));
    }
    let mut hu = vec![0.0; u.n_nodes()];
    let mut total = 0.0;
    for col in u.columns() {
        h.apply(col, &mut hu);
        total += dot(col, &hu);
    }
    let raw = 0.5 * u.weight() * total;
    Ok(Energy {
        raw,
        shift_corrected: raw - 0.5 * u.n_orbitals() as f64 * h.shift(),
    })
}
