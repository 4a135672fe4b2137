//! Green's operator `G = H^{-1}`: one sparse solve per orbital.
//!
//! `H` never changes during a run, so the direct backend factors it once
//! and reuses the factor for every column and every iteration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, CsrMatrix, Hamiltonian, OrbitalSet};
use crate::error::{FlowError, Result};

/// Work estimate `n * b^2` above which [`Backend::Auto`] picks CG.
const AUTO_DIRECT_WORK_LIMIT: f64 = 2.0e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Banded Cholesky factorization of the lexicographically ordered matrix.
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    PreconditionedCg,
    /// Direct when the band factor is affordable, CG otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub backend: Backend,
    pub cg_rel_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Auto,
            cg_rel_tol: 1e-12,
            cg_max_iter: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn direct() -> Self {
        Self {
            backend: Backend::Direct,
            ..Self::default()
        }
    }

    pub fn cg(rel_tol: f64) -> Self {
        Self {
            backend: Backend::PreconditionedCg,
            cg_rel_tol: rel_tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Direct(BandedCholesky),
    Cg {
        matrix: CsrMatrix,
        inv_diag: Vec<f64>,
        rel_tol: f64,
        max_iter: usize,
    },
}

/// Reusable solver for `H w = u`.
#[derive(Debug, Clone)]
pub struct GreenSolver {
    kind: Kind,
    n: usize,
}

impl GreenSolver {
    pub fn new(h: &Hamiltonian, config: &SolverConfig) -> Result<Self> {
        let backend = match config.backend {
            Backend::Auto => {
                let b = h.bandwidth() as f64;
                if h.n_nodes() as f64 * b * b <= AUTO_DIRECT_WORK_LIMIT {
                    Backend::Direct
                } else {
                    Backend::PreconditionedCg
                }
            }
            other => other,
        };
        let kind = match backend {
            Backend::Direct => Kind::Direct(BandedCholesky::factor(h.matrix(), h.bandwidth())?),
            _ => {
                if !(config.cg_rel_tol > 0.0) || config.cg_max_iter == 0 {
                    return Err(FlowError::Config(
                        "CG needs cg_rel_tol > 0 and cg_max_iter > 0".into(),
                    ));
                }
                let diag = h.matrix().diagonal();
                if let Some((i, d)) = diag.iter().enumerate().find(|(_, d)| **d <= 0.0) {
                    return Err(FlowError::NotPositiveDefinite { pivot: i, value: *d });
                }
                Kind::Cg {
                    matrix: h.matrix().clone(),
                    inv_diag: diag.iter().map(|d| 1.0 / d).collect(),
                    rel_tol: config.cg_rel_tol,
                    max_iter: config.cg_max_iter,
                }
            }
        };
        Ok(Self { kind, n: h.n_nodes() })
    }

    pub fn backend(&self) -> Backend {
        match self.kind {
            Kind::Direct(_) => Backend::Direct,
            Kind::Cg { .. } => Backend::PreconditionedCg,
        }
    }

    /// Relative residual the backend guarantees per solve.
    pub fn tolerance(&self) -> f64 {
        match &self.kind {
            Kind::Direct(_) => 1e-13,
            Kind::Cg { rel_tol, .. } => *rel_tol,
        }
    }

    /// Solves `H w = rhs` for a single vector.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n];
        match &self.kind {
            Kind::Direct(f) => {
                out.copy_from_slice(rhs);
                f.solve_in_place(&mut out, 1);
            }
            Kind::Cg {
                matrix,
                inv_diag,
                rel_tol,
                max_iter,
            } => pcg(matrix, inv_diag, rhs, &mut out, *rel_tol, *max_iter)?,
        }
        Ok(out)
    }

    /// `G U`, one independent solve per column.
    pub fn apply(&self, u: &OrbitalSet) -> Result<OrbitalSet> {
        if u.n_nodes() != self.n {
            return Err(FlowError::Shape(format!(
                "solver has {} unknowns, block has {}",
                self.n,
                u.n_nodes()
            )));
        }
        let n = self.n;
        let k = u.n_orbitals();
        let mut out = OrbitalSet::zeros(n, k, u.weight());
        if k == 0 || n == 0 {
            return Ok(out);
        }
        match &self.kind {
            Kind::Direct(f) => {
                // Columns are solved in interleaved groups so the band factor
                // is streamed once per group.
                let groups = rayon::current_num_threads().clamp(1, k);
                let per = k.div_ceil(groups);
                out.as_mut_slice()
                    .par_chunks_mut(n * per)
                    .enumerate()
                    .for_each(|(g, dst)| {
                        let cols = dst.len() / n;
                        let mut buf = vec![0.0; n * cols];
                        for c in 0..cols {
                            for (i, v) in u.column(g * per + c).iter().enumerate() {
                                buf[i * cols + c] = *v;
                            }
                        }
                        f.solve_in_place(&mut buf, cols);
                        for c in 0..cols {
                            for i in 0..n {
                                dst[c * n + i] = buf[i * cols + c];
                            }
                        }
                    });
            }
            Kind::Cg {
                matrix,
                inv_diag,
                rel_tol,
                max_iter,
            } => {
                out.as_mut_slice()
                    .par_chunks_mut(n)
                    .enumerate()
                    .try_for_each(|(j, dst)| pcg(matrix, inv_diag, u.column(j), dst, *rel_tol, *max_iter))?;
            }
        }
        Ok(out)
    }
}

/// `W = G U` through `solver`; `h` must be the operator the solver was built on.
pub fn apply_green(h: &Hamiltonian, solver: &GreenSolver, u: &OrbitalSet) -> Result<OrbitalSet> {
    if h.n_nodes() != solver.n {
        return Err(FlowError::Shape(
            "solver was built for a different operator".into(),
        ));
    }
    solver.apply(u)
}

/// Cholesky factor of a banded SPD matrix, rows stored densely over the band.
#[derive(Debug, Clone)]
struct BandedCholesky {
    n: usize,
    band: usize,
    /// Row `i` holds `L[i][i - band ..= i]` (entries left of column 0 are zero).
    rows: Vec<f64>,
}

impl BandedCholesky {
    fn factor(a: &CsrMatrix, band: usize) -> Result<Self> {
        let n = a.n();
        let w = band + 1;
        let mut rows = vec![0.0; n * w];
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (j, v) in cols.iter().zip(vals) {
                if *j <= i {
                    debug_assert!(i - j <= band);
                    rows[i * w + (j + band - i)] = *v;
                }
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(band);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(band));
                let mut s = rows[i * w + (j + band - i)];
                if j > klo {
                    let ri = &rows[i * w + (klo + band - i)..i * w + (j + band - i)];
                    let rj = &rows[j * w + (klo + band - j)..j * w + band];
                    s -= dot(ri, rj);
                }
                if j == i {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(FlowError::NotPositiveDefinite { pivot: i, value: s });
                    }
                    rows[i * w + band] = s.sqrt();
                } else {
                    rows[i * w + (j + band - i)] = s / rows[j * w + band];
                }
            }
        }
        Ok(Self { n, band, rows })
    }

    /// Solves in place for `r` right-hand sides stored row-interleaved
    /// (`x[i * r + c]` is entry `i` of column `c`).
    fn solve_in_place(&self, x: &mut [f64], r: usize) {
        let (n, band, w) = (self.n, self.band, self.band + 1);
        let mut acc = vec![0.0; r];
        for i in 0..n {
            let lo = i.saturating_sub(band);
            acc.copy_from_slice(&x[i * r..(i + 1) * r]);
            let row = &self.rows[i * w..(i + 1) * w];
            for k in lo..i {
                let l = row[k + band - i];
                if l != 0.0 {
                    let xk = &x[k * r..(k + 1) * r];
                    for (a, v) in acc.iter_mut().zip(xk) {
                        *a -= l * v;
                    }
                }
            }
            let inv = 1.0 / row[band];
            for (dst, a) in x[i * r..(i + 1) * r].iter_mut().zip(&acc) {
                *dst = a * inv;
            }
        }
        for i in (0..n).rev() {
            let lo = i.saturating_sub(band);
            let row = &self.rows[i * w..(i + 1) * w];
            let inv = 1.0 / row[band];
            x[i * r..(i + 1) * r].iter_mut().for_each(|v| *v *= inv);
            let (head, tail) = x.split_at_mut(i * r);
            let xi = &tail[..r];
            for k in lo..i {
                let l = row[k + band - i];
                if l != 0.0 {
                    axpy(-l, xi, &mut head[k * r..(k + 1) * r]);
                }
            }
        }
    }
}

fn pcg(
    a: &CsrMatrix,
    inv_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<()> {
    let n = b.len();
    x.iter_mut().for_each(|v| *v = 0.0);
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(());
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = 1.0;
    for _ in 0..max_iter {
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(FlowError::NotPositiveDefinite { pivot: 0, value: pap });
        }
        let alpha = rz / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        res = dot(&r, &r).sqrt() / b_norm;
        if res <= rel_tol {
            return Ok(());
        }
        for ((zi, ri), di) in z.iter_mut().zip(&r).zip(inv_diag) {
            *zi = ri * di;
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Err(FlowError::CgNotConverged {
        iterations: max_iter,
        residual: res,
    })
}
