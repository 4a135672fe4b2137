//! Conventional reference eigensolver used to validate the flow.
//!
//! Two tiers: a dense symmetric eigendecomposition for small grids, and a
//! Chebyshev-filtered subspace iteration with Rayleigh-Ritz and explicit
//! Gram-Schmidt for everything else. Neither shares an update rule with the
//! flow, so agreement between them and the flow is meaningful.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::operator::{modified_gram_schmidt, Hamiltonian, OrbitalSet};
use crate::smallmat::{sym_eig, DenseMatrix};

/// Largest problem the dense tier accepts.
pub const DENSE_LIMIT: usize = 4000;
/// Relative gap below which `lambda_N` and `lambda_{N+1}` count as equal.
pub const GAP_LIMIT: f64 = 1e-6;
const PACK_HEADER: &str = "ortho-flow-reference v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    Dense,
    Iterative,
}

/// Tuning of the iterative tier.
#[derive(Debug, Clone)]
pub struct IterativeConfig {
    /// Target for `||H u - lambda u|| / |lambda|` on every wanted pair.
    pub residual_tol: f64,
    pub degree: usize,
    pub max_outer: usize,
    pub seed: u64,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            residual_tol: 1e-11,
            degree: 30,
            max_outer: 400,
            seed: 0x5eed,
        }
    }
}

/// Reference eigenbasis `U*` with eigenvalues and the next eigenvalue.
///
/// Eigenvalues are stored without the operator shift; residuals are relative
/// to the shifted eigenvalues the solver actually saw.
#[derive(Debug, Clone)]
pub struct ReferencePack {
    pub ustar: OrbitalSet,
    pub lambda: Vec<f64>,
    pub lambda_next: f64,
    pub shift: f64,
    /// One per pair, including the `(N+1)`-th.
    pub residuals: Vec<f64>,
}

impl ReferencePack {
    pub fn n_orbitals(&self) -> usize {
        self.lambda.len()
    }

    /// `0.5 * sum lambda_i`.
    pub fn e_gs(&self) -> f64 {
        0.5 * self.lambda.iter().sum::<f64>()
    }

    /// `0.5 * (lambda_{N+1} - lambda_N + sum lambda_i)`.
    pub fn e_es(&self) -> f64 {
        let last = *self.lambda.last().expect("non-empty pack");
        self.e_gs() + 0.5 * (self.lambda_next - last)
    }

    /// Ground-state energy of the shifted operator, comparable with
    /// [`Energy::raw`](crate::operator::Energy).
    pub fn e_gs_shifted(&self) -> f64 {
        self.e_gs() + 0.5 * self.n_orbitals() as f64 * self.shift
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    /// Keeps the first `n` pairs; `lambda_next` becomes `lambda[n]`.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_orbitals() {
            return Err(FlowError::Shape(format!(
                "cannot keep {n} of {} reference pairs",
                self.n_orbitals()
            )));
        }
        let next = if n == self.n_orbitals() {
            self.lambda_next
        } else {
            self.lambda[n]
        };
        Ok(Self {
            ustar: self.ustar.select(0..n),
            lambda: self.lambda[..n].to_vec(),
            lambda_next: next,
            shift: self.shift,
            residuals: self.residuals[..=n].to_vec(),
        })
    }

    /// Serializes to the versioned text format: a header line, then
    /// whitespace-separated reals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let u = &self.ustar;
        let _ = writeln!(s, "{PACK_HEADER}");
        let _ = writeln!(
            s,
            "{} {} {:.17e} {:.17e}",
            u.n_nodes(),
            u.n_orbitals(),
            u.weight(),
            self.shift
        );
        let line = |s: &mut String, xs: &[f64]| {
            let row: Vec<String> = xs.iter().map(|x| format!("{x:.17e}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        };
        let mut lam = self.lambda.clone();
        lam.push(self.lambda_next);
        line(&mut s, &lam);
        line(&mut s, &self.residuals);
        for col in u.columns() {
            line(&mut s, col);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(PACK_HEADER) {
            return Err(FlowError::Parse(format!("missing header `{PACK_HEADER}`")));
        }
        let mut tokens = lines.flat_map(str::split_whitespace);
        let mut next_real = |what: &str| -> Result<f64> {
            let tok = tokens
                .next()
                .ok_or_else(|| FlowError::Parse(format!("pack ends before {what}")))?;
            tok.parse::<f64>()
                .map_err(|_| FlowError::Parse(format!("bad number `{tok}` in {what}")))
        };
        let n_nodes = next_real("node count")? as usize;
        let n_orbitals = next_real("orbital count")? as usize;
        let weight = next_real("weight")?;
        let shift = next_real("shift")?;
        if n_orbitals == 0 {
            return Err(FlowError::Parse("pack holds no orbitals".into()));
        }
        let lambda = (0..n_orbitals)
            .map(|_| next_real("eigenvalues"))
            .collect::<Result<Vec<_>>>()?;
        let lambda_next = next_real("eigenvalues")?;
        let residuals = (0..=n_orbitals)
            .map(|_| next_real("residuals"))
            .collect::<Result<Vec<_>>>()?;
        let data = (0..n_nodes * n_orbitals)
            .map(|_| next_real("orbitals"))
            .collect::<Result<Vec<_>>>()?;
        if next_real("end").is_ok() {
            return Err(FlowError::Parse("trailing data after orbitals".into()));
        }
        Ok(Self {
            ustar: OrbitalSet::from_column_major(n_nodes, n_orbitals, weight, data)?,
            lambda,
            lambda_next,
            shift,
            residuals,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

/// The `k` lowest eigenpairs of `h` plus `lambda_{k+1}`.
pub fn reference_eigenpairs(h: &Hamiltonian, k: usize, mode: OracleMode) -> Result<ReferencePack> {
    match mode {
        OracleMode::Dense => dense_pairs(h, k),
        OracleMode::Iterative => iterative_pairs(h, k, &IterativeConfig::default()),
    }
}

fn check_count(h: &Hamiltonian, k: usize) -> Result<()> {
    if k == 0 || k + 1 > h.n_nodes() {
        return Err(FlowError::Reference(format!(
            "need 1 <= k < {} eigenpairs, asked for {k}",
            h.n_nodes()
        )));
    }
    Ok(())
}

fn dense_pairs(h: &Hamiltonian, k: usize) -> Result<ReferencePack> {
    check_count(h, k)?;
    let n = h.n_nodes();
    if n > DENSE_LIMIT {
        return Err(FlowError::Reference(format!(
            "dense oracle is limited to {DENSE_LIMIT} unknowns, problem has {n}"
        )));
    }
    let eig = sym_eig(&h.matrix().to_dense())?;
    let scale = 1.0 / h.mass_weight().sqrt();
    let cols: Vec<Vec<f64>> = (0..=k)
        .map(|j| eig.vectors.column(j).iter().map(|v| v * scale).collect())
        .collect();
    let mut u = OrbitalSet::from_columns(&cols, h.mass_weight())?;
    modified_gram_schmidt(&mut u)?;
    finish(h, u, eig.values[..=k].to_vec())
}

/// Chebyshev-filtered subspace iteration.
pub fn iterative_pairs(h: &Hamiltonian, k: usize, cfg: &IterativeConfig) -> Result<ReferencePack> {
    check_count(h, k)?;
    let n = h.n_nodes();
    let want = k + 1;
    let p = (2 * want).max(want + 10).min(n);
    let (_, upper) = h.gershgorin_bounds();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data: Vec<f64> = (0..n * p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut x = OrbitalSet::from_column_major(n, p, h.mass_weight(), data)?;
    modified_gram_schmidt(&mut x)?;
    let (mut x, mut theta) = rayleigh_ritz(h, &x)?;

    let mut worst = f64::INFINITY;
    for _ in 0..cfg.max_outer {
        let res = residuals(h, &x.select(0..want), &theta[..want])?;
        worst = res.iter().copied().fold(0.0, f64::max);
        if worst <= cfg.residual_tol {
            return finish(h, x.select(0..want), theta[..want].to_vec());
        }
        // Damp [theta_p, upper], amplify everything below.
        let cut = theta[p - 1];
        if !(cut < upper) {
            break;
        }
        let mut y = chebyshev_filter(h, &x, cfg.degree, cut, upper, theta[0])?;
        modified_gram_schmidt(&mut y)?;
        (x, theta) = rayleigh_ritz(h, &y)?;
    }
    Err(FlowError::Reference(format!(
        "subspace iteration stalled after {} filters, worst residual {worst:.3e}",
        cfg.max_outer
    )))
}

fn rayleigh_ritz(h: &Hamiltonian, x: &OrbitalSet) -> Result<(OrbitalSet, Vec<f64>)> {
    let hx = h.apply_block(x)?;
    let proj = x.inner(&hx)?.sym_part();
    let eig = sym_eig(&proj)?;
    Ok((x.mul_matrix(&eig.vectors)?, eig.values))
}

/// Scaled three-term recurrence for `C_m((H - c)/e)` applied to `x`, with
/// `[a, b]` the damped interval and `a0` a lower estimate of the spectrum.
fn chebyshev_filter(
    h: &Hamiltonian,
    x: &OrbitalSet,
    degree: usize,
    a: f64,
    b: f64,
    a0: f64,
) -> Result<OrbitalSet> {
    let e = 0.5 * (b - a);
    let c = 0.5 * (b + a);
    let mut sigma = e / (a0 - c);
    let sigma1 = sigma;
    let n = x.n_nodes();

    let shifted = |v: &OrbitalSet| -> Result<OrbitalSet> {
        let mut hv = h.apply_block(v)?;
        for (o, vi) in hv.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *o -= c * vi;
        }
        Ok(hv)
    };

    let mut prev = x.clone();
    let mut cur = shifted(x)?.scaled(sigma1 / e);
    for _ in 1..degree {
        let sigma2 = 1.0 / (2.0 / sigma1 - sigma);
        let mut next = shifted(&cur)?.scaled(2.0 * sigma2 / e);
        let damp = sigma * sigma2;
        for (o, p) in next.as_mut_slice().iter_mut().zip(prev.as_slice()) {
            *o -= damp * p;
        }
        debug_assert_eq!(next.n_nodes(), n);
        prev = cur;
        cur = next;
        sigma = sigma2;
    }
    Ok(cur)
}

/// `||H u_i - lambda_i u_i|| / |lambda_i|` with `lambda_i` the shifted values.
pub fn residuals(h: &Hamiltonian, u: &OrbitalSet, shifted: &[f64]) -> Result<Vec<f64>> {
    let hu = h.apply_block(u)?;
    let res = hu.sub(&u.mul_matrix(&DenseMatrix::from_diag(shifted))?)?;
    Ok(res
        .column_norms()
        .iter()
        .zip(u.column_norms())
        .zip(shifted)
        .map(|((r, un), l)| r / (un * l.abs().max(f64::MIN_POSITIVE)))
        .collect())
}

fn finish(h: &Hamiltonian, u: OrbitalSet, shifted: Vec<f64>) -> Result<ReferencePack> {
    let k = shifted.len() - 1;
    let residuals = residuals(h, &u, &shifted)?;
    let sigma = h.shift();
    let lambda: Vec<f64> = shifted[..k].iter().map(|l| l - sigma).collect();
    let lambda_next = shifted[k] - sigma;
    let last = lambda[k - 1];
    if lambda_next - last <= GAP_LIMIT * lambda_next.abs().max(last.abs()) {
        return Err(FlowError::DegenerateGap {
            lambda_n: last,
            lambda_next,
        });
    }
    Ok(ReferencePack {
        ustar: u.select(0..k),
        lambda,
        lambda_next,
        shift: sigma,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BoxDomain, Potential, TensorGrid};

    fn oscillator_1d(m: usize) -> Hamiltonian {
        let g = TensorGrid::new(BoxDomain::symmetric(8.0, 1).unwrap(), &[m]).unwrap();
        Hamiltonian::assemble(&g, &Potential::harmonic(), 0.5, 0.0).unwrap()
    }

    #[test]
    fn dense_oscillator_levels() {
        let pack = reference_eigenpairs(&oscillator_1d(256), 3, OracleMode::Dense).unwrap();
        // The three-point stencil lowers level n by c h^2 <p^4> / 12 with
        // <p^4> = 3 (2n^2 + 2n + 1) / 4, i.e. 1.2e-4, 6.1e-4 and 1.6e-3 for
        // n = 0, 1, 2. The third level is outside 1e-3 at this spacing.
        let h2 = (16.0f64 / 256.0).powi(2);
        for (n, l) in pack.lambda.iter().enumerate() {
            let n = n as f64;
            let exact = n + 0.5;
            let predicted = 0.5 * h2 / 12.0 * 0.75 * (2.0 * n * n + 2.0 * n + 1.0);
            let err = exact - l;
            assert!(err > 0.0 && (err - predicted).abs() < 0.1 * predicted, "{l}");
        }
        assert!((pack.lambda[0] - 0.5).abs() < 1e-3 && (pack.lambda[1] - 1.5).abs() < 1e-3);
        assert!((pack.lambda_next - 3.5).abs() < 1e-2);
        assert!(pack.ustar.orthogonality_error() < 1e-10);
        assert!(pack.max_residual() < 1e-8);
        assert!(pack.e_gs() < pack.e_es());
    }

    #[test]
    fn iterative_matches_dense() {
        let h = oscillator_1d(501);
        let d = reference_eigenpairs(&h, 6, OracleMode::Dense).unwrap();
        let it = reference_eigenpairs(&h, 6, OracleMode::Iterative).unwrap();
        for (a, b) in d.lambda.iter().zip(&it.lambda) {
            assert!((a - b).abs() <= 1e-8 * a.abs(), "{a} vs {b}");
        }
        assert!(it.max_residual() <= 1e-8);
        assert!(it.ustar.orthogonality_error() < 1e-10);
    }

    #[test]
    fn degenerate_gap_is_rejected() {
        let g = TensorGrid::new(BoxDomain::symmetric(5.0, 2).unwrap(), &[24, 24]).unwrap();
        let h = Hamiltonian::assemble(&g, &Potential::harmonic(), 0.5, 0.0).unwrap();
        // lambda_2 = lambda_3 on a symmetric 2D grid.
        let err = reference_eigenpairs(&h, 2, OracleMode::Iterative).unwrap_err();
        assert!(matches!(err, FlowError::DegenerateGap { .. }));
        assert!(reference_eigenpairs(&h, 3, OracleMode::Iterative).is_ok());
    }

    #[test]
    fn dense_limit_and_bad_counts() {
        let g = TensorGrid::new(BoxDomain::symmetric(5.0, 2).unwrap(), &[70, 70]).unwrap();
        let h = Hamiltonian::assemble(&g, &Potential::harmonic(), 0.5, 0.0).unwrap();
        assert!(reference_eigenpairs(&h, 1, OracleMode::Dense).is_err());
        assert!(reference_eigenpairs(&oscillator_1d(8), 0, OracleMode::Dense).is_err());
        assert!(reference_eigenpairs(&oscillator_1d(8), 7, OracleMode::Dense).is_err());
    }

    #[test]
    fn text_round_trip() {
        let pack = reference_eigenpairs(&oscillator_1d(40), 2, OracleMode::Dense).unwrap();
        let back = ReferencePack::from_text(&pack.to_text()).unwrap();
        assert_eq!(back.lambda, pack.lambda);
        assert_eq!(back.lambda_next, pack.lambda_next);
        assert_eq!(back.ustar, pack.ustar);
        assert!(ReferencePack::from_text("nope\n1 2").is_err());
        let mut short = pack.to_text();
        short.truncate(short.len() - 30);
        assert!(ReferencePack::from_text(&short).is_err());
    }

    #[test]
    fn truncate_moves_next_eigenvalue() {
        let pack = reference_eigenpairs(&oscillator_1d(64), 3, OracleMode::Dense).unwrap();
        let t = pack.truncate(2).unwrap();
        assert_eq!(t.lambda_next, pack.lambda[2]);
        assert_eq!(t.ustar.n_orbitals(), 2);
    }
}
