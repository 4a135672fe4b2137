//! Metrics reported along a run: per-iteration records, distances to a
//! reference subspace, projections, exponential-rate fits, and an explicit
//! RK4 integrator of the continuous flow used as a cross-check.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::operator::{apply_green, inner_a, GreenSolver, Hamiltonian, OrbitalSet};
use crate::oracle::ReferencePack;
use crate::smallmat::{cholesky, procrustes, svd, sym_eig, DenseMatrix};

/// RK4 refuses steps larger than this.
pub const RK4_MAX_DT: f64 = 1e-2;
/// RK4 aborts when the block norm exceeds this.
pub const RK4_BLOW_UP: f64 = 1e3;

/// Per-iteration diagnostics. Reference-dependent fields are `None` when no
/// reference is available.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n: usize,
    pub t: f64,
    pub energy: f64,
    pub energy_shift_corrected: f64,
    pub err_e: f64,
    pub ortho_err: f64,
    /// `(E(U^n) - E_ref) / |E_ref|`.
    pub err_ref: Option<f64>,
    pub err_u: Option<f64>,
    pub dist_class_a: Option<f64>,
    pub delta_l2: Option<f64>,
    pub delta_h1: Option<f64>,
}

/// Least-squares line through `(n, ln value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub window: f64,
    pub r_squared: f64,
    pub samples: usize,
}

/// Minimum number of positive samples [`fit_rate`] accepts.
pub const MIN_FIT_SAMPLES: usize = 10;

/// Fits `ln series[i] ~ intercept + slope * i` over the last `window` fraction.
pub fn fit_rate(series: &[f64], window: f64) -> Result<RateFit> {
    let xs: Vec<f64> = (0..series.len()).map(|i| i as f64).collect();
    fit_rate_at(&xs, series, window)
}

/// [`fit_rate`] with explicit abscissae (e.g. iteration numbers of sparse
/// snapshots). Non-positive values inside the window are skipped.
pub fn fit_rate_at(xs: &[f64], series: &[f64], window: f64) -> Result<RateFit> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(FlowError::InsufficientData(format!(
            "fit window must lie in (0, 1], got {window}"
        )));
    }
    if xs.len() != series.len() {
        return Err(FlowError::Shape("abscissae and series differ in length".into()));
    }
    let skip = ((1.0 - window) * series.len() as f64).floor() as usize;
    let pts: Vec<(f64, f64)> = xs[skip..]
        .iter()
        .zip(&series[skip..])
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(x, v)| (*x, v.ln()))
        .collect();
    if pts.len() < MIN_FIT_SAMPLES {
        return Err(FlowError::InsufficientData(format!(
            "{} usable samples in the fit window, need {MIN_FIT_SAMPLES}",
            pts.len()
        )));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        window,
        r_squared,
        samples: pts.len(),
    })
}

/// `||U - U_end|| / ||U_end||`, no alignment.
pub fn err_u(u: &OrbitalSet, u_end: &OrbitalSet) -> Result<f64> {
    Ok(u.sub(u_end)?.norm() / u_end.norm())
}

pub fn err_u_series<'a>(
    history: impl IntoIterator<Item = &'a OrbitalSet>,
    u_end: &OrbitalSet,
) -> Result<Vec<f64>> {
    let out = history
        .into_iter()
        .map(|u| err_u(u, u_end))
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(FlowError::InsufficientData("empty history".into()));
    }
    Ok(out)
}

/// `||u_i - u_i^end|| / ||u_i^end||` for each column.
pub fn err_u_columns(u: &OrbitalSet, u_end: &OrbitalSet) -> Result<Vec<f64>> {
    let d = u.sub(u_end)?.column_norms();
    Ok(d.iter().zip(u_end.column_norms()).map(|(a, b)| a / b).collect())
}

/// Bounded store of iterates `(n, U^n)`.
///
/// Every `stride`-th iterate is kept; when full, every second snapshot is
/// dropped and the stride doubles, so the log always spans the whole run.
#[derive(Debug, Clone)]
pub struct SnapshotLog {
    capacity: usize,
    stride: usize,
    entries: Vec<(usize, OrbitalSet)>,
}

impl SnapshotLog {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(2),
            stride: 1,
            entries: Vec::new(),
        }
    }

    pub fn offer(&mut self, n: usize, u: &OrbitalSet) {
        if !n.is_multiple_of(self.stride) {
            return;
        }
        if self.entries.len() == self.capacity {
            self.stride *= 2;
            let s = self.stride;
            self.entries.retain(|(k, _)| k % s == 0);
            if !n.is_multiple_of(s) {
                return;
            }
        }
        self.entries.push((n, u.clone()));
    }

    pub fn entries(&self) -> &[(usize, OrbitalSet)] {
        &self.entries
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

/// `P U`, `P_perp U`, and the energy projection `P_a U` for comparison.
#[derive(Debug, Clone)]
pub struct Projections {
    pub pu: OrbitalSet,
    pub perp: OrbitalSet,
    pub pa_u: OrbitalSet,
    /// `||P U - P_a U||_a / ||U||_a`.
    pub lemma_gap: f64,
}

/// `||X||_a = sqrt(tr <X, X>_a)`.
pub fn norm_a(x: &OrbitalSet, h: &Hamiltonian) -> Result<f64> {
    Ok(inner_a(x, x, h)?.trace().max(0.0).sqrt())
}

pub fn projections(u: &OrbitalSet, pack: &ReferencePack, h: &Hamiltonian) -> Result<Projections> {
    let us = &pack.ustar;
    let pu = us.mul_matrix(&us.inner(u)?)?;
    let perp = u.sub(&pu)?;
    let gram_a = inner_a(us, us, h)?;
    let cross_a = inner_a(us, u, h)?;
    let coeffs = crate::smallmat::chol_solve(&gram_a, &cross_a)?;
    let pa_u = us.mul_matrix(&coeffs)?;
    let gap = norm_a(&pu.sub(&pa_u)?, h)?;
    let scale = norm_a(u, h)?;
    Ok(Projections {
        pu,
        perp,
        pa_u,
        lemma_gap: if scale > 0.0 { gap / scale } else { gap },
    })
}

/// `||P_perp U||_a`.
pub fn perp_norm_a(u: &OrbitalSet, pack: &ReferencePack, h: &Hamiltonian) -> Result<f64> {
    let us = &pack.ustar;
    norm_a(&u.sub(&us.mul_matrix(&us.inner(u)?)?)?, h)
}

/// Ratios `x[n+1] / x[n]`.
pub fn contraction_factors(series: &[f64]) -> Vec<f64> {
    series.windows(2).map(|w| w[1] / w[0]).collect()
}

#[derive(Debug, Clone)]
pub struct SubspaceDistances {
    /// `sin` of the largest principal angle in L2.
    pub delta_l2: f64,
    /// Same, with both frames orthonormalized in the energy inner product.
    pub delta_h1: f64,
    /// Principal angles in L2, ascending.
    pub angles: Vec<f64>,
    /// `min_Q ||U - U* Q||`.
    pub dist_class_l2: f64,
    /// `||U - U* Q_a||_a` with `Q_a` the Procrustes solution for `<U*, U>_a`.
    pub dist_class_a: f64,
}

/// Distances between `span(U)` and `span(U*)`; both must be L2-orthonormal.
pub fn subspace_distances(u: &OrbitalSet, ustar: &OrbitalSet, h: &Hamiltonian) -> Result<SubspaceDistances> {
    let cross = ustar.inner(u)?;
    let perp = u.sub(&ustar.mul_matrix(&cross)?)?;
    let angles = angles_from(&cross, &perp.inner(&perp)?)?;
    let delta_l2 = angles.last().map_or(0.0, |t| t.sin());
    let dist_class_l2 = angles
        .iter()
        .map(|t| 4.0 * (0.5 * t).sin().powi(2))
        .sum::<f64>()
        .sqrt();

    // With G = L L^T, the frame X L^{-T} is a-orthonormal.
    let hu = h.apply_block(u)?;
    let hs = h.apply_block(ustar)?;
    let whiten = |g: DenseMatrix| -> Result<DenseMatrix> {
        let l = cholesky(&g.sym_part())?;
        Ok(lower_solve(&l, &DenseMatrix::identity(l.rows()))?.transpose())
    };
    let tu = whiten(u.inner(&hu)?)?;
    let ts = whiten(ustar.inner(&hs)?)?;
    let (x, hx) = (u.mul_matrix(&tu)?, hu.mul_matrix(&tu)?);
    let (y, hy) = (ustar.mul_matrix(&ts)?, hs.mul_matrix(&ts)?);
    let cross_xa = y.inner(&hx)?;
    let perp_a = x.sub(&y.mul_matrix(&cross_xa)?)?;
    let hperp_a = hx.sub(&hy.mul_matrix(&cross_xa)?)?;
    let delta_h1 = angles_from(&cross_xa, &perp_a.inner(&hperp_a)?)?
        .last()
        .map_or(0.0, |t| t.sin());

    let q = procrustes(&ustar.inner(&hu)?)?.q;
    let diff = u.sub(&ustar.mul_matrix(&q)?)?;
    let dist_class_a = norm_a(&diff, h)?;
    Ok(SubspaceDistances {
        delta_l2,
        delta_h1,
        angles,
        dist_class_l2,
        dist_class_a,
    })
}

/// Principal angles from the cross matrix of two orthonormal frames.
pub fn principal_angles(cross: &DenseMatrix) -> Result<Vec<f64>> {
    let mut a: Vec<f64> = svd(cross)?
        .values
        .iter()
        .map(|s| s.clamp(0.0, 1.0).acos())
        .collect();
    a.sort_by(f64::total_cmp);
    Ok(a)
}

/// Angles from both the cosines (singular values of `cross`) and the sines
/// (square roots of the eigenvalues of the residual Gram matrix), which keeps
/// small angles accurate.
fn angles_from(cross: &DenseMatrix, perp_gram: &DenseMatrix) -> Result<Vec<f64>> {
    let cos = svd(cross)?.values;
    let sin = sym_eig(&perp_gram.sym_part())?.values;
    Ok(cos
        .iter()
        .zip(&sin)
        .map(|(c, s)| s.max(0.0).sqrt().atan2(c.clamp(0.0, 1.0)))
        .collect())
}

/// `L^{-1} B` for lower-triangular `L`.
fn lower_solve(l: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Right-hand side of the continuous flow, `-U <GU, U> + GU <U, U>`.
pub fn flow_rhs(u: &OrbitalSet, h: &Hamiltonian, solver: &GreenSolver) -> Result<OrbitalSet> {
    let gu = apply_green(h, solver, u)?;
    let mut out = gu.mul_matrix(&u.inner(u)?)?;
    out.accumulate(u, &gu.inner(u)?.scale(-1.0))?;
    Ok(out)
}

/// Classical RK4 on the continuous flow from `u0` up to time `t_end`.
///
/// The step is shrunk so that it divides `t_end` evenly.
pub fn integrate_flow_rk4(
    u0: &OrbitalSet,
    h: &Hamiltonian,
    solver: &GreenSolver,
    dt: f64,
    t_end: f64,
) -> Result<OrbitalSet> {
    if !(dt > 0.0 && dt <= RK4_MAX_DT) {
        return Err(FlowError::Config(format!(
            "RK4 step must lie in (0, {RK4_MAX_DT}], got {dt}"
        )));
    }
    if !(t_end >= 0.0) {
        return Err(FlowError::Config(format!("negative end time {t_end}")));
    }
    let steps = (t_end / dt).ceil() as usize;
    if steps == 0 {
        return Ok(u0.clone());
    }
    let dt = t_end / steps as f64;
    let mut u = u0.clone();
    for s in 0..steps {
        let k1 = flow_rhs(&u, h, solver)?;
        let k2 = flow_rhs(&axpy_block(&u, 0.5 * dt, &k1), h, solver)?;
        let k3 = flow_rhs(&axpy_block(&u, 0.5 * dt, &k2), h, solver)?;
        let k4 = flow_rhs(&axpy_block(&u, dt, &k3), h, solver)?;
        let data = u.as_mut_slice();
        let (a, b, c, d) = (k1.as_slice(), k2.as_slice(), k3.as_slice(), k4.as_slice());
        for i in 0..data.len() {
            data[i] += dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]);
        }
        let norm = u.norm();
        if !(norm <= RK4_BLOW_UP) {
            return Err(FlowError::BlowUp {
                t: (s + 1) as f64 * dt,
                norm,
            });
        }
    }
    Ok(u)
}

fn axpy_block(u: &OrbitalSet, alpha: f64, k: &OrbitalSet) -> OrbitalSet {
    let mut out = u.clone();
    for (o, v) in out.as_mut_slice().iter_mut().zip(k.as_slice()) {
        *o += alpha * v;
    }
    out
}

/// `|lambda_i - lambda_i^ref| / |lambda_i^ref|`.
pub fn eigenvalue_errors(lambda: &[f64], reference: &[f64]) -> Vec<f64> {
    lambda
        .iter()
        .zip(reference)
        .map(|(l, r)| (l - r).abs() / r.abs())
        .collect()
}
