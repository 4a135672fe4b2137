//! Orthogonality-preserving evolution for the `N` lowest eigenpairs.
//!
//! The continuous model is `dU/dt = -L_U U` with
//! `L_U V = U <GU, V> - GU <U, V>` and `G = H^{-1}`. It is discretized by
//! the implicit midpoint rule
//!
//! ```text
//! (U^{n+1} - U^n) / tau = -L_{U^n} (U^{n+1} + U^n) / 2
//! ```
//!
//! which keeps `<U^n, U^n> = I` exactly in exact arithmetic. Because `L_U`
//! is linear in its argument once `U^n` is frozen, the midpoint system
//! collapses to two `N x N` matrices `A^n`, `B^n`, and each step costs `N`
//! Green solves plus dense block work. No orthonormalization ever runs inside
//! the loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::RunRecord;
use crate::error::{FlowError, Result};
use crate::operator::{
    apply_green, energy, modified_gram_schmidt, orthonormalization_count, Energy, GreenSolver, Hamiltonian,
    OrbitalSet,
};
use crate::smallmat::{chol_solve, sym_eig, DenseMatrix};

/// Maximum number of fresh draws in [`random_orthonormal_init`].
const INIT_DRAWS: usize = 4;
/// Slack on the energy-monotonicity check, relative to `|E(U^n)|`.
pub const ENERGY_SLACK: f64 = 1e-12;

/// When to stop the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StopRule {
    /// `|E(U^{n+1}) - E(U^n)| / |E(U^n)| <= tol`.
    EnergyChange,
    /// `(E(U^n) - E_ref) / |E_ref| <= tol` against a known ground-state
    /// energy of the (shifted) operator.
    ReferenceEnergy { reference: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n_orbitals: usize,
    pub tau: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Abort when `||I - <U^n, U^n>||_F` exceeds this.
    pub ortho_alarm: f64,
    /// Lower bound on the denominator of the relative energy change.
    pub energy_floor: f64,
    pub stop: StopRule,
}

impl FlowConfig {
    pub fn new(n_orbitals: usize, tau: f64) -> Self {
        Self {
            n_orbitals,
            tau,
            tau_min: tau,
            tau_max: tau,
            tol: 1e-10,
            max_iter: 100_000,
            seed: 0,
            ortho_alarm: 1e-8,
            energy_floor: 1e-14,
            stop: StopRule::EnergyChange,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FlowError::Config(msg));
        if self.n_orbitals == 0 {
            return bad("n_orbitals must be positive".into());
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau && self.tau <= self.tau_max) {
            return bad(format!(
                "need 0 < tau_min <= tau <= tau_max, got {} <= {} <= {}",
                self.tau_min, self.tau, self.tau_max
            ));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if !(self.ortho_alarm > 0.0) || !(self.energy_floor > 0.0) {
            return bad("ortho_alarm and energy_floor must be positive".into());
        }
        Ok(())
    }
}

/// Iterate `U^n` with its cached diagnostics.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub n: usize,
    /// Accumulated time `sum tau_k`.
    pub t: f64,
    pub u: OrbitalSet,
    /// `G U^n`, filled by the step that consumes this state.
    pub green: Option<OrbitalSet>,
    pub energy: Energy,
    /// Relative energy change of the step that produced this state
    /// (`|E(U^0)|` for the initial state).
    pub err_e: f64,
    pub ortho_err: f64,
    /// `||<GU, U> - <GU, U>^T||_F` seen by the step that produced this state.
    pub green_asymmetry: f64,
}

impl FlowState {
    pub fn new(u: OrbitalSet, h: &Hamiltonian) -> Result<Self> {
        let e = energy(&u, h)?;
        Ok(Self {
            n: 0,
            t: 0.0,
            ortho_err: u.orthogonality_error(),
            u,
            green: None,
            err_e: e.raw.abs(),
            energy: e,
            green_asymmetry: 0.0,
        })
    }

    pub fn record(&self) -> RunRecord {
        RunRecord {
            n: self.n,
            t: self.t,
            energy: self.energy.raw,
            energy_shift_corrected: self.energy.shift_corrected,
            err_e: self.err_e,
            ortho_err: self.ortho_err,
            ..RunRecord::default()
        }
    }
}

/// Random block with standard-normal entries, orthonormalized in L2.
///
/// This is the only place where the crate orthonormalizes an iterate.
pub fn random_orthonormal_init(
    n_nodes: usize,
    weight: f64,
    n_orbitals: usize,
    seed: u64,
) -> Result<OrbitalSet> {
    if n_orbitals > n_nodes {
        return Err(FlowError::RankDeficient(format!(
            "{n_orbitals} orbitals cannot be orthonormal on {n_nodes} nodes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..INIT_DRAWS {
        let data: Vec<f64> = (0..n_nodes * n_orbitals)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut u = OrbitalSet::from_column_major(n_nodes, n_orbitals, weight, data)?;
        match modified_gram_schmidt(&mut u) {
            Ok(()) => return Ok(u),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one draw"))
}

/// The `N x N` matrices of one step.
#[derive(Debug, Clone)]
pub struct StepMatrices {
    /// `sym(<GU, U>)`.
    pub s_gu: DenseMatrix,
    /// `<GU, GU>`.
    pub s_gg: DenseMatrix,
    /// `I + tau^2/4 (S_GG - S_GU S_GU)`.
    pub m: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub asymmetry: f64,
}

/// Solves the midpoint system for `A^n` and `B^n` given `U^n` and `W = G U^n`.
pub fn step_matrices(u: &OrbitalSet, w: &OrbitalSet, tau: f64) -> Result<StepMatrices> {
    let k = w.inner(u)?;
    let asymmetry = k.asymmetry();
    let s_gu = k.sym_part();
    let s_gg = w.inner(w)?;
    let n = u.n_orbitals();
    let id = DenseMatrix::identity(n);
    let m = id.add(&s_gg.sub(&s_gu.matmul(&s_gu)).scale(0.25 * tau * tau));
    let b = chol_solve(&m, &id)?;
    let a = id.sub(&b).scale(2.0 / tau).add(&s_gu.matmul(&b));
    Ok(StepMatrices {
        s_gu,
        s_gg,
        m,
        a,
        b,
        asymmetry,
    })
}

/// `L_U V = U <GU, V> - GU <U, V>`.
pub fn l_operator(u: &OrbitalSet, gu: &OrbitalSet, v: &OrbitalSet) -> Result<OrbitalSet> {
    let mut out = u.mul_matrix(&gu.inner(v)?)?;
    out.accumulate(gu, &u.inner(v)?.scale(-1.0))?;
    Ok(out)
}

/// One step of the scheme:
///
/// 1. `W = G U^n`
/// 2. `B^n = (I + tau^2/4 (<W,W> - S S))^{-1}` with `S = sym(<W, U^n>)`
/// 3. `A^n = (2/tau)(I - B^n) + S B^n`
/// 4. `U^{n+1} = U^n - tau U^n A^n + tau W B^n`
pub fn step(
    state: &mut FlowState,
    tau: f64,
    h: &Hamiltonian,
    solver: &GreenSolver,
    energy_floor: f64,
) -> Result<FlowState> {
    let w = match state.green.take() {
        Some(w) => w,
        None => apply_green(h, solver, &state.u)?,
    };
    let mats = step_matrices(&state.u, &w, tau)?;
    let n = state.u.n_orbitals();
    let keep = DenseMatrix::identity(n).sub(&mats.a.scale(tau));
    let mut next = state.u.mul_matrix(&keep)?;
    next.accumulate(&w, &mats.b.scale(tau))?;
    state.green = Some(w);

    let e = energy(&next, h)?;
    let err_e = (e.raw - state.energy.raw).abs() / state.energy.raw.abs().max(energy_floor);
    Ok(FlowState {
        n: state.n + 1,
        t: state.t + tau,
        ortho_err: next.orthogonality_error(),
        u: next,
        green: None,
        energy: e,
        err_e,
        green_asymmetry: mats.asymmetry,
    })
}

/// Result of [`run`].
#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub state: FlowState,
    /// One record per iterate, starting with `n = 0`.
    pub history: Vec<RunRecord>,
    pub converged: bool,
    /// Orthonormalizations performed inside the loop (always zero).
    pub reorthogonalizations: usize,
    pub max_ortho_err: f64,
    /// Steps where `E(U^{n+1}) > E(U^n) + ENERGY_SLACK * |E(U^n)|`.
    pub energy_increases: usize,
    /// Largest `(E(U^{n+1}) - E(U^n)) / |E(U^n)|` seen.
    pub max_energy_rise: f64,
    pub max_green_asymmetry: f64,
}

impl FlowOutcome {
    pub fn iterations(&self) -> usize {
        self.state.n
    }
}

/// Runs the scheme until the stop rule fires or `max_iter` is reached.
pub fn run(
    config: &FlowConfig,
    h: &Hamiltonian,
    solver: &GreenSolver,
    u0: OrbitalSet,
) -> Result<FlowOutcome> {
    run_with(config, h, solver, u0, |_, _| Ok(()))
}

/// [`run`] with a per-iterate observer that may fill optional record fields.
///
/// The observer sees the initial state and every accepted iterate.
pub fn run_with<F>(
    config: &FlowConfig,
    h: &Hamiltonian,
    solver: &GreenSolver,
    u0: OrbitalSet,
    mut observer: F,
) -> Result<FlowOutcome>
where
    F: FnMut(&FlowState, &mut RunRecord) -> Result<()>,
{
    config.validate()?;
    if u0.n_orbitals() != config.n_orbitals {
        return Err(FlowError::Shape(format!(
            "config asks for {} orbitals, initial block has {}",
            config.n_orbitals,
            u0.n_orbitals()
        )));
    }
    let mut state = FlowState::new(u0, h)?;
    if state.ortho_err > config.ortho_alarm {
        return Err(FlowError::OrthogonalityAlarm {
            iteration: 0,
            drift: state.ortho_err,
            alarm: config.ortho_alarm,
        });
    }
    let mut history = Vec::new();
    let mut rec = state.record();
    rec.err_ref = reference_error(config, &state);
    observer(&state, &mut rec)?;
    history.push(rec);

    let gs_before = orthonormalization_count();
    let mut converged = false;
    let mut max_ortho = state.ortho_err;
    let mut energy_increases = 0;
    let mut max_rise = f64::NEG_INFINITY;
    let mut max_asym: f64 = 0.0;
    while state.n < config.max_iter {
        let next = step(&mut state, config.tau, h, solver, config.energy_floor)?;
        if next.ortho_err > config.ortho_alarm || !next.ortho_err.is_finite() {
            return Err(FlowError::OrthogonalityAlarm {
                iteration: next.n,
                drift: next.ortho_err,
                alarm: config.ortho_alarm,
            });
        }
        let rise = (next.energy.raw - state.energy.raw) / state.energy.raw.abs().max(config.energy_floor);
        max_rise = max_rise.max(rise);
        if rise > ENERGY_SLACK {
            energy_increases += 1;
        }
        max_ortho = max_ortho.max(next.ortho_err);
        max_asym = max_asym.max(next.green_asymmetry);
        state = next;

        let mut rec = state.record();
        rec.err_ref = reference_error(config, &state);
        observer(&state, &mut rec)?;
        let done = match config.stop {
            StopRule::EnergyChange => state.err_e <= config.tol,
            StopRule::ReferenceEnergy { .. } => rec.err_ref.is_some_and(|e| e <= config.tol),
        };
        history.push(rec);
        if done {
            converged = true;
            break;
        }
    }
    Ok(FlowOutcome {
        state,
        history,
        converged,
        reorthogonalizations: orthonormalization_count() - gs_before,
        max_ortho_err: max_ortho,
        energy_increases,
        max_energy_rise: max_rise,
        max_green_asymmetry: max_asym,
    })
}

fn reference_error(config: &FlowConfig, state: &FlowState) -> Option<f64> {
    match config.stop {
        StopRule::ReferenceEnergy { reference } => {
            Some((state.energy.raw - reference) / reference.abs().max(config.energy_floor))
        }
        StopRule::EnergyChange => None,
    }
}

/// Eigenvalues of `<G U, U>^{-1}`, shift-corrected and ascending.
pub fn extract_eigenvalues(u_end: &OrbitalSet, h: &Hamiltonian, solver: &GreenSolver) -> Result<Vec<f64>> {
    let w = apply_green(h, solver, u_end)?;
    let mu = sym_eig(&w.inner(u_end)?.sym_part())?.values;
    if let Some(&bad) = mu.iter().find(|&&m| m <= 0.0) {
        return Err(FlowError::NonPositiveGreenEigenvalue(bad));
    }
    let mut lambda: Vec<f64> = mu.iter().map(|m| 1.0 / m - h.shift()).collect();
    lambda.sort_by(f64::total_cmp);
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BoxDomain, Potential, TensorGrid};
    use crate::operator::SolverConfig;
    use crate::oracle::{reference_eigenpairs, OracleMode};
    use proptest::prelude::*;

    fn oscillator_1d(m: usize) -> Hamiltonian {
        let g = TensorGrid::new(BoxDomain::symmetric(8.0, 1).unwrap(), &[m]).unwrap();
        Hamiltonian::assemble(&g, &Potential::harmonic(), 0.5, 0.0).unwrap()
    }

    #[test]
    fn init_is_orthonormal_and_deterministic() {
        let u1 = random_orthonormal_init(50, 0.1, 1, 3).unwrap();
        assert!((u1.column_norms()[0] - 1.0).abs() < 1e-14);
        let a = random_orthonormal_init(50, 0.1, 3, 7).unwrap();
        let b = random_orthonormal_init(50, 0.1, 3, 7).unwrap();
        assert!(a.orthogonality_error() <= 1e-13);
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(random_orthonormal_init(2, 1.0, 3, 0).is_err());
    }

    #[test]
    fn small_tau_limit_of_a_matrix() {
        let h = oscillator_1d(64);
        let solver = GreenSolver::new(&h, &SolverConfig::direct()).unwrap();
        let u = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 3, 1).unwrap();
        let w = solver.apply(&u).unwrap();
        let tau = 1e-6;
        let m = step_matrices(&u, &w, tau).unwrap();
        let gap = m.a.sub(&m.s_gu).frobenius_norm();
        // A - S = O(tau) with a constant of order ||S_GG - S S||.
        let c = m.s_gg.sub(&m.s_gu.matmul(&m.s_gu)).frobenius_norm() * m.s_gu.frobenius_norm();
        assert!(gap <= tau * c.max(1.0), "gap {gap}, c {c}");
    }

    #[test]
    fn one_step_preserves_orthogonality_and_lowers_energy() {
        let h = oscillator_1d(256);
        let solver = GreenSolver::new(&h, &SolverConfig::direct()).unwrap();
        let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 3, 11).unwrap();
        let mut s0 = FlowState::new(u0, &h).unwrap();
        let s1 = step(&mut s0, 0.5, &h, &solver, 1e-14).unwrap();
        assert!(s1.ortho_err <= 1e-12);
        assert!(s1.energy.raw <= s0.energy.raw);
    }

    #[test]
    fn eigenbasis_is_a_fixed_point() {
        let h = oscillator_1d(128);
        let solver = GreenSolver::new(&h, &SolverConfig::direct()).unwrap();
        let pack = reference_eigenpairs(&h, 3, OracleMode::Dense).unwrap();
        let mut s = FlowState::new(pack.ustar.clone(), &h).unwrap();
        let next = step(&mut s, 1.0, &h, &solver, 1e-14).unwrap();
        let drift = next.u.sub(&pack.ustar).unwrap().norm();
        assert!(drift <= 1e-10, "drift {drift}");
        let lambda = extract_eigenvalues(&pack.ustar, &h, &solver).unwrap();
        for (a, b) in lambda.iter().zip(&pack.lambda) {
            assert!((a - b).abs() <= 1e-10 * b.abs());
        }
    }

    #[test]
    fn loose_tolerance_stops_after_one_step() {
        let h = oscillator_1d(64);
        let solver = GreenSolver::new(&h, &SolverConfig::direct()).unwrap();
        let mut cfg = FlowConfig::new(2, 0.5);
        cfg.tol = 1e10;
        let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 2, 0).unwrap();
        let out = run(&cfg, &h, &solver, u0).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations(), 1);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn max_iter_gives_partial_history() {
        let h = oscillator_1d(64);
        let solver = GreenSolver::new(&h, &SolverConfig::direct()).unwrap();
        let mut cfg = FlowConfig::new(2, 0.5);
        cfg.max_iter = 5;
        cfg.tol = 1e-300;
        let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 2, 0).unwrap();
        let out = run(&cfg, &h, &solver, u0).unwrap();
        assert!(!out.converged);
        assert_eq!(out.history.len(), 6);
        assert!(out.history.windows(2).all(|w| w[0].n < w[1].n));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = FlowConfig::new(2, 0.5);
        cfg.tau_max = 0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = FlowConfig::new(2, 0.5);
        cfg.tol = 0.0;
        assert!(cfg.validate().is_err());
        assert!(FlowConfig::new(0, 0.5).validate().is_err());
    }

    #[test]
    fn run_converges_on_1d_oscillator() {
        let h = oscillator_1d(128);
        let solver = GreenSolver::new(&h, &SolverConfig::direct()).unwrap();
        let pack = reference_eigenpairs(&h, 3, OracleMode::Dense).unwrap();
        let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 3, 5).unwrap();
        let out = run(&FlowConfig::new(3, 0.5), &h, &solver, u0).unwrap();
        assert!(out.converged);
        assert_eq!(out.reorthogonalizations, 0);
        assert_eq!(out.energy_increases, 0);
        assert!(out.max_ortho_err < 1e-12);
        let lambda = extract_eigenvalues(&out.state.u, &h, &solver).unwrap();
        for (a, b) in lambda.iter().zip(&pack.lambda) {
            assert!((a - b).abs() / b.abs() < 1e-7, "{a} vs {b}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn step_matrix_is_spd_and_skew_identity_holds(seed in 0u64..100_000, k in 1usize..5) {
            let h = oscillator_1d(40);
            let solver = GreenSolver::new(&h, &SolverConfig::direct()).unwrap();
            let u = random_orthonormal_init(h.n_nodes(), h.mass_weight(), k, seed).unwrap();
            let w = solver.apply(&u).unwrap();
            // Cholesky inside step_matrices fails if M is not SPD.
            prop_assert!(step_matrices(&u, &w, 3.0).is_ok());

            let v = random_orthonormal_init(h.n_nodes(), h.mass_weight(), k, seed + 1).unwrap();
            let z = random_orthonormal_init(h.n_nodes(), h.mass_weight(), k, seed + 2).unwrap();
            let lv = l_operator(&u, &w, &v).unwrap();
            let lz = l_operator(&u, &w, &z).unwrap();
            let skew = v.inner(&lz).unwrap().add(&lv.inner(&z).unwrap());
            prop_assert!(skew.max_abs() < 1e-10);
        }
    }
}
