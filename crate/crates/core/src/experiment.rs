//! Experiment configuration, presets, and run-directory output.
//!
//! A config is a TOML file with `[problem]`, `[solver]`, `[flow]` and
//! `[output]` tables. Unknown keys are rejected. Every field except
//! `problem.kind` has a default taken from the chosen preset:
//!
//! ```toml
//! [problem]
//! kind = "oscillator2d"      # oscillator1d | oscillator2d | hydrogen3d | custom
//! # lower = [-5.5, -5.5]     # box, required for `custom`
//! # upper = [5.5, 5.5]
//! # cells = [128, 128]       # cells per axis; interior nodes = cells - 1
//! # n_orbitals = 15
//! # c_lap = 0.5
//! # shift = 0.0
//! # potential = { kind = "harmonic", scale = 1.0 }
//!
//! [solver]
//! backend = "direct"         # direct | preconditioned-cg | auto
//! cg_rel_tol = 1e-12
//! oracle = "iterative"       # dense | iterative
//! reference = true           # compute the same-grid reference eigenpairs
//!
//! [flow]
//! tau = 0.05
//! tol = 1e-10
//! max_iter = 100000
//! seed = 0
//! stop = "energy-change"     # energy-change | reference-energy
//!
//! [output]
//! dir = "oscillator2d"       # relative to --output-dir
//! ```
//!
//! A run directory holds `records.csv`, `summary.json`, `eigenvalues.csv`,
//! `final_state.txt`, the resolved `config.toml`, and `reference.txt` when a
//! reference was computed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diagnostics::{
    eigenvalue_errors, err_u, err_u_columns, fit_rate_at, perp_norm_a, subspace_distances, RateFit,
    RunRecord, SnapshotLog,
};
use crate::error::{FlowError, Result};
use crate::flow::{
    extract_eigenvalues, random_orthonormal_init, run_with, FlowConfig, FlowOutcome, StopRule,
};
use crate::grid::{BoxDomain, Potential, TensorGrid, DEFAULT_COULOMB_CAP};
use crate::operator::{Backend, GreenSolver, Hamiltonian, OrbitalSet, SolverConfig};
use crate::oracle::{reference_eigenpairs, residuals, OracleMode, ReferencePack};

pub const SCHEMA_VERSION: u32 = 1;
pub const RECORDS_HEADER: &str =
    "n,t,energy,energy_shift_corrected,err_E,ortho_err,err_U,dist_class_a,delta_L2";
pub const EIGENVALUES_HEADER: &str = "i,lambda,lambda_ref,err_i";
pub const INIT_DISTRIBUTION: &str =
    "independent standard normal entries (ChaCha8 seeded by flow.seed), then modified Gram-Schmidt";
/// Largest grid a config may ask for.
pub const MAX_NODES: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Oscillator1d,
    Oscillator2d,
    Hydrogen3d,
    Custom,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Oscillator1d => "oscillator1d",
            Self::Oscillator2d => "oscillator2d",
            Self::Hydrogen3d => "hydrogen3d",
            Self::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PotentialSpec {
    Harmonic {
        #[serde(default = "one")]
        scale: f64,
    },
    Coulomb {
        #[serde(default = "one")]
        charge: f64,
        #[serde(default = "coulomb_cap")]
        cap: f64,
    },
    Constant {
        value: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn coulomb_cap() -> f64 {
    DEFAULT_COULOMB_CAP
}

impl PotentialSpec {
    pub fn build(self) -> Potential {
        match self {
            Self::Harmonic { scale } => Potential::Harmonic { scale },
            Self::Coulomb { charge, cap } => Potential::Coulomb { charge, cap },
            Self::Constant { value } => Potential::Constant(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub cells: Option<Vec<usize>>,
    pub n_orbitals: Option<usize>,
    pub c_lap: Option<f64>,
    pub shift: Option<f64>,
    pub potential: Option<PotentialSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub backend: Option<Backend>,
    pub cg_rel_tol: Option<f64>,
    pub cg_max_iter: Option<usize>,
    pub oracle: Option<OracleMode>,
    pub reference: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopKind {
    EnergyChange,
    ReferenceEnergy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub tau: Option<f64>,
    pub tau_min: Option<f64>,
    pub tau_max: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub seed: Option<u64>,
    pub ortho_alarm: Option<f64>,
    pub energy_floor: Option<f64>,
    pub stop: Option<StopKind>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
    pub records_csv: Option<bool>,
    pub summary_json: Option<bool>,
    pub eigenvalue_table_csv: Option<bool>,
    /// Iterates kept in memory for err_U.
    pub snapshots: Option<usize>,
    /// Compute reference distances every this many iterations.
    pub distance_every: Option<usize>,
    pub fit_window: Option<f64>,
}

/// Raw config as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn preset(kind: ProblemKind) -> Self {
        Self {
            problem: ProblemSection {
                kind,
                lower: None,
                upper: None,
                cells: None,
                n_orbitals: None,
                c_lap: None,
                shift: None,
                potential: None,
            },
            solver: SolverSection::default(),
            flow: FlowSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FlowError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills defaults from the preset and validates every field.
    pub fn resolve(&self) -> Result<Experiment> {
        Experiment::resolve(self)
    }
}

/// Fully resolved, validated experiment.
#[derive(Debug, Clone, Serialize)]
pub struct Experiment {
    pub kind: ProblemKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
    pub n_orbitals: usize,
    pub c_lap: f64,
    pub shift: f64,
    pub potential: PotentialSpec,
    pub solver: SolverConfig,
    pub oracle: OracleMode,
    pub reference: bool,
    pub flow: FlowConfig,
    pub stop: StopKind,
    pub dir: String,
    pub records_csv: bool,
    pub summary_json: bool,
    pub eigenvalue_table_csv: bool,
    pub snapshots: usize,
    pub distance_every: usize,
    pub fit_window: f64,
}

struct Preset {
    half_width: f64,
    dim: usize,
    cells: usize,
    n: usize,
    tau: f64,
    shift: f64,
    potential: PotentialSpec,
    backend: Backend,
}

fn preset(kind: ProblemKind) -> Option<Preset> {
    let harmonic = PotentialSpec::Harmonic { scale: 1.0 };
    match kind {
        ProblemKind::Oscillator1d => Some(Preset {
            half_width: 8.0,
            dim: 1,
            cells: 256,
            n: 3,
            tau: 0.5,
            shift: 0.0,
            potential: harmonic,
            backend: Backend::Direct,
        }),
        // Paper scale is 39601 quadratic FEM unknowns; here 127^2 FD nodes.
        ProblemKind::Oscillator2d => Some(Preset {
            half_width: 5.5,
            dim: 2,
            cells: 128,
            n: 15,
            tau: 0.05,
            shift: 0.0,
            potential: harmonic,
            backend: Backend::Direct,
        }),
        // 33 cells give 32^3 interior nodes and keep the origin off the grid.
        // Paper scale is an adaptive FEM mesh with 570662 unknowns.
        ProblemKind::Hydrogen3d => Some(Preset {
            half_width: 20.0,
            dim: 3,
            cells: 33,
            n: 5,
            tau: 1.0,
            shift: 1.0,
            potential: PotentialSpec::Coulomb {
                charge: 1.0,
                cap: DEFAULT_COULOMB_CAP,
            },
            backend: Backend::Auto,
        }),
        ProblemKind::Custom => None,
    }
}

fn bad(msg: impl Into<String>) -> FlowError {
    FlowError::Config(msg.into())
}

impl Experiment {
    fn resolve(cfg: &ExperimentConfig) -> Result<Self> {
        let p = &cfg.problem;
        let pre = preset(p.kind);
        let need = |what: &str| bad(format!("custom problems must set problem.{what}"));

        let (lower, upper) = match (&p.lower, &p.upper, &pre) {
            (Some(l), Some(u), _) => (l.clone(), u.clone()),
            (None, None, Some(pr)) => (vec![-pr.half_width; pr.dim], vec![pr.half_width; pr.dim]),
            (None, None, None) => return Err(need("lower and problem.upper")),
            _ => return Err(bad("problem.lower and problem.upper must be given together")),
        };
        let dim = lower.len();
        let cells = match (&p.cells, &pre) {
            (Some(c), _) => c.clone(),
            (None, Some(pr)) => vec![pr.cells; dim],
            (None, None) => return Err(need("cells")),
        };
        if cells.len() != dim || upper.len() != dim {
            return Err(bad(format!(
                "box has {dim} lower bounds, {} upper bounds and {} cell counts",
                upper.len(),
                cells.len()
            )));
        }
        if !(1..=3).contains(&dim) {
            return Err(bad(format!("dimension must be 1, 2 or 3, got {dim}")));
        }
        if let Some(c) = cells.iter().find(|&&c| c < 2) {
            return Err(bad(format!("each axis needs at least 2 cells, got {c}")));
        }
        let nodes = cells
            .iter()
            .try_fold(1usize, |acc, c| acc.checked_mul(c - 1))
            .filter(|n| *n <= MAX_NODES)
            .ok_or_else(|| bad(format!("grid {cells:?} exceeds {MAX_NODES} nodes")))?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(bad(format!("box lower {lower:?} must lie below upper {upper:?}")));
        }

        let n_orbitals = p
            .n_orbitals
            .or(pre.as_ref().map(|pr| pr.n))
            .ok_or_else(|| need("n_orbitals"))?;
        if n_orbitals == 0 || n_orbitals >= nodes {
            return Err(bad(format!(
                "n_orbitals must lie in 1..{nodes}, got {n_orbitals}"
            )));
        }
        let c_lap = p.c_lap.unwrap_or(0.5);
        if !(c_lap > 0.0 && c_lap.is_finite()) {
            return Err(bad(format!("c_lap must be positive, got {c_lap}")));
        }
        let shift = p.shift.or(pre.as_ref().map(|pr| pr.shift)).unwrap_or(0.0);
        if !shift.is_finite() {
            return Err(bad("shift must be finite"));
        }
        let potential = p
            .potential
            .or(pre.as_ref().map(|pr| pr.potential))
            .ok_or_else(|| need("potential"))?;

        let s = &cfg.solver;
        let solver = SolverConfig {
            backend: s
                .backend
                .or(pre.as_ref().map(|pr| pr.backend))
                .unwrap_or(Backend::Auto),
            cg_rel_tol: s.cg_rel_tol.unwrap_or(1e-12),
            cg_max_iter: s.cg_max_iter.unwrap_or(10_000),
        };
        if !(solver.cg_rel_tol > 0.0 && solver.cg_rel_tol < 1.0) || solver.cg_max_iter == 0 {
            return Err(bad("cg_rel_tol must lie in (0, 1) and cg_max_iter be positive"));
        }
        let reference = s.reference.unwrap_or(true);
        let oracle = s.oracle.unwrap_or(OracleMode::Iterative);

        let f = &cfg.flow;
        let tau = f.tau.or(pre.as_ref().map(|pr| pr.tau)).unwrap_or(0.5);
        let mut flow = FlowConfig::new(n_orbitals, tau);
        flow.tau_min = f.tau_min.unwrap_or(tau);
        flow.tau_max = f.tau_max.unwrap_or(tau);
        flow.tol = f.tol.unwrap_or(flow.tol);
        flow.max_iter = f.max_iter.unwrap_or(flow.max_iter);
        flow.seed = f.seed.unwrap_or(0);
        flow.ortho_alarm = f.ortho_alarm.unwrap_or(flow.ortho_alarm);
        flow.energy_floor = f.energy_floor.unwrap_or(flow.energy_floor);
        flow.validate()?;
        let stop = f.stop.unwrap_or(StopKind::EnergyChange);
        if stop == StopKind::ReferenceEnergy && !reference {
            return Err(bad("stop = \"reference-energy\" needs solver.reference = true"));
        }

        let o = &cfg.output;
        let fit_window = o.fit_window.unwrap_or(0.5);
        if !(fit_window > 0.0 && fit_window <= 1.0) {
            return Err(bad(format!("fit_window must lie in (0, 1], got {fit_window}")));
        }
        let dir = o.dir.clone().unwrap_or_else(|| p.kind.name().to_string());
        if Path::new(&dir).is_absolute() {
            return Err(bad("output.dir must be relative to --output-dir"));
        }
        Ok(Self {
            kind: p.kind,
            lower,
            upper,
            cells,
            n_orbitals,
            c_lap,
            shift,
            potential,
            solver,
            oracle,
            reference,
            flow,
            stop,
            dir,
            records_csv: o.records_csv.unwrap_or(true),
            summary_json: o.summary_json.unwrap_or(true),
            eigenvalue_table_csv: o.eigenvalue_table_csv.unwrap_or(true),
            snapshots: o.snapshots.unwrap_or(64).max(2),
            distance_every: o.distance_every.unwrap_or(1).max(1),
            fit_window,
        })
    }

    pub fn grid(&self) -> Result<TensorGrid> {
        TensorGrid::new(
            BoxDomain::new(self.lower.clone(), self.upper.clone())?,
            &self.cells,
        )
    }

    pub fn hamiltonian(&self) -> Result<Hamiltonian> {
        Hamiltonian::assemble(&self.grid()?, &self.potential.build(), self.c_lap, self.shift)
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let mut e = self.clone();
        e.flow.tau = tau;
        e.flow.tau_min = e.flow.tau_min.min(tau);
        e.flow.tau_max = e.flow.tau_max.max(tau);
        e.flow.validate()?;
        Ok(e)
    }
}

/// Whether the loop met its stop rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    MaxIter,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Converged => 0,
            Self::MaxIter => 2,
        }
    }
}

impl FlowError {
    /// Process exit code for this error: 3 for bad input, 4 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlowError::Config(_)
            | FlowError::Io { .. }
            | FlowError::Parse(_)
            | FlowError::InvalidGrid(_)
            | FlowError::NonFinitePotential { .. }
            | FlowError::Shape(_)
            | FlowError::DegenerateGap { .. } => 3,
            _ => 4,
        }
    }
}

/// Rate fits over the iteration history.
#[derive(Debug, Clone, Serialize)]
pub struct Fits {
    /// Last iteration included in the fits: the first `n` with
    /// `err_E <= tol`, or the final iteration.
    pub horizon: usize,
    pub err_e: Option<RateFit>,
    pub err_u: Option<RateFit>,
    pub dist_class_a: Option<RateFit>,
    /// One per orbital, `None` when there were too few samples.
    pub err_u_orbitals: Vec<Option<RateFit>>,
    /// `slope(err_E) / slope(err_U)`.
    pub rate_ratio: Option<f64>,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub experiment: Experiment,
    pub status: RunStatus,
    pub outcome: FlowOutcome,
    pub eigenvalues: Vec<f64>,
    pub reference: Option<ReferencePack>,
    pub err_i: Option<Vec<f64>>,
    pub fits: Fits,
    /// `(n, err_U, per-orbital err_U)` at each kept snapshot.
    pub err_u: Vec<(usize, f64, Vec<f64>)>,
    pub omega: Option<f64>,
    pub wall_time_s: f64,
    pub run_dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FlowError + '_ {
    move |source| FlowError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Runs `exp`, writing into `output_dir/exp.dir`.
pub fn run_experiment(exp: &Experiment, output_dir: &Path) -> Result<RunReport> {
    let started = Instant::now();
    let run_dir = output_dir.join(&exp.dir);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;

    let h = exp.hamiltonian()?;
    let solver = GreenSolver::new(&h, &exp.solver)?;
    let reference = if exp.reference {
        let pack = reference_eigenpairs(&h, exp.n_orbitals, exp.oracle)?;
        pack.write(&run_dir.join("reference.txt"))?;
        Some(pack)
    } else {
        None
    };
    let mut flow = exp.flow.clone();
    if exp.stop == StopKind::ReferenceEnergy {
        let pack = reference.as_ref().expect("validated");
        flow.stop = StopRule::ReferenceEnergy {
            reference: pack.e_gs_shifted(),
        };
    }

    let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), exp.n_orbitals, flow.seed)?;
    let mut log = SnapshotLog::new(exp.snapshots);
    let outcome = run_with(&flow, &h, &solver, u0, |state, rec| {
        log.offer(state.n, &state.u);
        if let Some(pack) = &reference {
            if state.n % exp.distance_every == 0 {
                let d = subspace_distances(&state.u, &pack.ustar, &h)?;
                rec.dist_class_a = Some(d.dist_class_a);
                rec.delta_l2 = Some(d.delta_l2);
                rec.delta_h1 = Some(d.delta_h1);
            }
        }
        Ok(())
    })?;
    let status = if outcome.converged {
        RunStatus::Converged
    } else {
        RunStatus::MaxIter
    };
    let mut outcome = outcome;
    let u_end = outcome.state.u.clone();
    let eigenvalues = extract_eigenvalues(&u_end, &h, &solver)?;
    let err_i = reference
        .as_ref()
        .map(|p| eigenvalue_errors(&eigenvalues, &p.lambda));

    let mut err_u_rows = Vec::new();
    for (n, u) in log.entries() {
        err_u_rows.push((*n, err_u(u, &u_end)?, err_u_columns(u, &u_end)?));
    }
    for (n, e, _) in &err_u_rows {
        if let Some(rec) = outcome.history.get_mut(*n) {
            rec.err_u = Some(*e);
        }
    }
    let fits = fit_history(
        &outcome.history,
        &err_u_rows,
        exp.n_orbitals,
        flow.tol,
        exp.fit_window,
    );
    let omega = match &reference {
        Some(pack) => contraction_estimate(log.entries(), pack, &h)?,
        None => None,
    };

    let report = RunReport {
        experiment: exp.clone(),
        status,
        outcome,
        eigenvalues,
        reference,
        err_i,
        fits,
        err_u: err_u_rows,
        omega,
        wall_time_s: started.elapsed().as_secs_f64(),
        run_dir: run_dir.clone(),
    };
    write_run_dir(&report, &u_end, &h)?;
    Ok(report)
}

fn fit_history(
    history: &[RunRecord],
    err_u_rows: &[(usize, f64, Vec<f64>)],
    n_orbitals: usize,
    tol: f64,
    window: f64,
) -> Fits {
    let last = history.last().map_or(0, |r| r.n);
    let horizon = history
        .iter()
        .skip(1)
        .find(|r| r.err_e <= tol)
        .map_or(last, |r| r.n);
    let span: Vec<&RunRecord> = history[1..=horizon.min(history.len() - 1)].iter().collect();
    let xs: Vec<f64> = span.iter().map(|r| r.n as f64).collect();
    let fit = |ys: Vec<f64>, xs: &[f64]| fit_rate_at(xs, &ys, window).ok();
    let err_e = fit(span.iter().map(|r| r.err_e).collect(), &xs);
    let dist: Vec<(f64, f64)> = span
        .iter()
        .filter_map(|r| r.dist_class_a.map(|d| (r.n as f64, d)))
        .collect();
    let dist_class_a = fit(
        dist.iter().map(|p| p.1).collect(),
        &dist.iter().map(|p| p.0).collect::<Vec<_>>(),
    );

    let rows: Vec<&(usize, f64, Vec<f64>)> =
        err_u_rows.iter().filter(|r| r.0 >= 1 && r.0 <= horizon).collect();
    let ux: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
    let err_u = fit(rows.iter().map(|r| r.1).collect(), &ux);
    let err_u_orbitals = (0..n_orbitals)
        .map(|i| fit(rows.iter().map(|r| r.2[i]).collect(), &ux))
        .collect();
    let rate_ratio = match (&err_e, &err_u) {
        (Some(e), Some(u)) if u.slope != 0.0 => Some(e.slope / u.slope),
        _ => None,
    };
    Fits {
        horizon,
        err_e,
        err_u,
        dist_class_a,
        err_u_orbitals,
        rate_ratio,
    }
}

/// Largest per-iteration contraction of `||P_perp U^n||_a` over the second
/// half of the kept snapshots.
fn contraction_estimate(
    snaps: &[(usize, OrbitalSet)],
    pack: &ReferencePack,
    h: &Hamiltonian,
) -> Result<Option<f64>> {
    let tail = &snaps[snaps.len() / 2..];
    let mut norms = Vec::with_capacity(tail.len());
    for (n, u) in tail {
        norms.push((*n, perp_norm_a(u, pack, h)?));
    }
    Ok(norms
        .windows(2)
        .filter(|w| w[0].1 > 1e-13 && w[1].1 > 1e-13 && w[1].0 > w[0].0)
        .map(|w| (w[1].1 / w[0].1).powf(1.0 / (w[1].0 - w[0].0) as f64))
        .reduce(f64::max))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.17e}"))
}

pub fn records_csv(history: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = RECORDS_HEADER.split(',').collect();
    let csv_err = |e: csv::Error| FlowError::Parse(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in history {
        w.write_record([
            r.n.to_string(),
            format!("{:.17e}", r.t),
            format!("{:.17e}", r.energy),
            format!("{:.17e}", r.energy_shift_corrected),
            format!("{:.17e}", r.err_e),
            format!("{:.17e}", r.ortho_err),
            opt(r.err_u),
            opt(r.dist_class_a),
            opt(r.delta_l2),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| FlowError::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

/// Reads `n` and `err_E` back from a records file.
pub fn read_err_e(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| FlowError::Parse(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| FlowError::Parse(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>().join(",") != RECORDS_HEADER {
        return Err(FlowError::Parse(format!(
            "{} has an unexpected header",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| FlowError::Parse(e.to_string()))?;
        let parse = |i: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| FlowError::Parse(format!("bad value `{}` in records", &row[i])))
        };
        out.push((parse(0)? as usize, parse(4)?));
    }
    Ok(out)
}

fn eigenvalue_table(lambda: &[f64], reference: Option<&[f64]>) -> String {
    let mut s = format!("{EIGENVALUES_HEADER}\n");
    for (i, l) in lambda.iter().enumerate() {
        match reference {
            Some(r) => {
                let e = (l - r[i]).abs() / r[i].abs();
                s += &format!("{},{l:.17e},{:.17e},{e:.6e}\n", i + 1, r[i]);
            }
            None => s += &format!("{},{l:.17e},,\n", i + 1),
        }
    }
    s
}

fn fit_json(f: &Option<RateFit>) -> serde_json::Value {
    serde_json::to_value(f).expect("serializable")
}

fn summary_json(r: &RunReport) -> serde_json::Value {
    let o = &r.outcome;
    let s = &o.state;
    let continuous_rate = r.reference.as_ref().map(|p| {
        let ln = *p.lambda.last().expect("non-empty") + p.shift;
        let ln1 = p.lambda_next + p.shift;
        2.0 * (1.0 / ln - 1.0 / ln1)
    });
    json!({
        "schema_version": SCHEMA_VERSION,
        "code_version": env!("CARGO_PKG_VERSION"),
        "config": r.experiment,
        "init_distribution": INIT_DISTRIBUTION,
        "energy_floor_note": "err_E divides by max(|E(U^n)|, flow.energy_floor)",
        "status": r.status,
        "exit_code": r.status.exit_code(),
        "iterations": o.iterations(),
        "final_time": s.t,
        "final_energy": s.energy.raw,
        "final_energy_shift_corrected": s.energy.shift_corrected,
        "final_err_E": s.err_e,
        "eigenvalues": r.eigenvalues,
        "reference_eigenvalues": r.reference.as_ref().map(|p| &p.lambda),
        "reference_lambda_next": r.reference.as_ref().map(|p| p.lambda_next),
        "reference_residuals": r.reference.as_ref().map(|p| &p.residuals),
        "reference_e_gs": r.reference.as_ref().map(|p| p.e_gs()),
        "reference_e_es": r.reference.as_ref().map(|p| p.e_es()),
        "err_i": r.err_i,
        "max_ortho_err": o.max_ortho_err,
        "reorthogonalizations": o.reorthogonalizations,
        "energy_increases": o.energy_increases,
        "max_energy_rise": o.max_energy_rise,
        "max_green_asymmetry": o.max_green_asymmetry,
        "fits": {
            "horizon": r.fits.horizon,
            "window": r.experiment.fit_window,
            "err_E": fit_json(&r.fits.err_e),
            "err_U": fit_json(&r.fits.err_u),
            "dist_class_a": fit_json(&r.fits.dist_class_a),
            "err_U_orbitals": r.fits.err_u_orbitals,
            "rate_ratio": r.fits.rate_ratio,
        },
        "omega": r.omega,
        "continuous_rate_reference": continuous_rate,
        "wall_time_s": r.wall_time_s,
    })
}

fn write_run_dir(r: &RunReport, u_end: &OrbitalSet, h: &Hamiltonian) -> Result<()> {
    let dir = &r.run_dir;
    let exp = &r.experiment;
    write_file(&dir.join("config.toml"), &resolved_config(exp).to_toml())?;
    if exp.records_csv {
        write_file(&dir.join("records.csv"), &records_csv(&r.outcome.history)?)?;
    }
    if exp.eigenvalue_table_csv {
        let refs = r.reference.as_ref().map(|p| p.lambda.as_slice());
        write_file(
            &dir.join("eigenvalues.csv"),
            &eigenvalue_table(&r.eigenvalues, refs),
        )?;
    }
    if exp.summary_json {
        let text = serde_json::to_string_pretty(&summary_json(r)).expect("json");
        write_file(&dir.join("summary.json"), &text)?;
    }
    // Final state in reference-pack format, so it can serve as a reference.
    let shifted: Vec<f64> = r.eigenvalues.iter().map(|l| l + h.shift()).collect();
    let mut res = residuals(h, u_end, &shifted)?;
    res.push(f64::NAN);
    let state = ReferencePack {
        ustar: u_end.clone(),
        lambda: r.eigenvalues.clone(),
        lambda_next: f64::NAN,
        shift: h.shift(),
        residuals: res,
    };
    state.write(&dir.join("final_state.txt"))
}

/// Config that reproduces `exp` exactly.
pub fn resolved_config(exp: &Experiment) -> ExperimentConfig {
    ExperimentConfig {
        problem: ProblemSection {
            kind: exp.kind,
            lower: Some(exp.lower.clone()),
            upper: Some(exp.upper.clone()),
            cells: Some(exp.cells.clone()),
            n_orbitals: Some(exp.n_orbitals),
            c_lap: Some(exp.c_lap),
            shift: Some(exp.shift),
            potential: Some(exp.potential),
        },
        solver: SolverSection {
            backend: Some(exp.solver.backend),
            cg_rel_tol: Some(exp.solver.cg_rel_tol),
            cg_max_iter: Some(exp.solver.cg_max_iter),
            oracle: Some(exp.oracle),
            reference: Some(exp.reference),
        },
        flow: FlowSection {
            tau: Some(exp.flow.tau),
            tau_min: Some(exp.flow.tau_min),
            tau_max: Some(exp.flow.tau_max),
            tol: Some(exp.flow.tol),
            max_iter: Some(exp.flow.max_iter),
            seed: Some(exp.flow.seed),
            ortho_alarm: Some(exp.flow.ortho_alarm),
            energy_floor: Some(exp.flow.energy_floor),
            stop: Some(exp.stop),
        },
        output: OutputSection {
            dir: Some(exp.dir.clone()),
            records_csv: Some(exp.records_csv),
            summary_json: Some(exp.summary_json),
            eigenvalue_table_csv: Some(exp.eigenvalue_table_csv),
            snapshots: Some(exp.snapshots),
            distance_every: Some(exp.distance_every),
            fit_window: Some(exp.fit_window),
        },
    }
}

/// One run per `tau` in `output_dir/exp.dir/tau_<tau>`, plus `table.csv`
/// with one row per eigenvalue and one `err_i` column per `tau`, and a final
/// row of iteration counts.
pub fn sweep_tau(exp: &Experiment, taus: &[f64], output_dir: &Path) -> Result<Vec<RunReport>> {
    if taus.is_empty() {
        return Err(bad("sweep needs at least one tau"));
    }
    let base = output_dir.join(&exp.dir);
    let mut reports = Vec::new();
    for &tau in taus {
        let mut e = exp.with_tau(tau)?;
        e.dir = format!("tau_{tau}");
        reports.push(run_experiment(&e, &base)?);
    }
    let mut s = String::from("i,lambda_ref");
    for tau in taus {
        s += &format!(",err_i@tau={tau}");
    }
    s.push('\n');
    for i in 0..exp.n_orbitals {
        let lref = reports[0].reference.as_ref().map(|p| p.lambda[i]);
        s += &format!("{},{}", i + 1, opt(lref));
        for r in &reports {
            s += &format!(
                ",{}",
                r.err_i
                    .as_ref()
                    .map_or(String::new(), |e| format!("{:.6e}", e[i]))
            );
        }
        s.push('\n');
    }
    s += "iterations,";
    for r in &reports {
        s += &format!(",{}", r.outcome.iterations());
    }
    s.push('\n');
    write_file(&base.join("table.csv"), &s)?;
    Ok(reports)
}

/// Computes the reference pack for `exp` and writes it to
/// `output_dir/exp.dir/reference.txt`.
pub fn write_reference(exp: &Experiment, output_dir: &Path) -> Result<(ReferencePack, PathBuf)> {
    let dir = output_dir.join(&exp.dir);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let pack = reference_eigenpairs(&exp.hamiltonian()?, exp.n_orbitals, exp.oracle)?;
    let path = dir.join("reference.txt");
    pack.write(&path)?;
    Ok((pack, path))
}

/// Result of [`compare_reference`].
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub pack: String,
    pub err_i: Vec<f64>,
    pub delta_l2: f64,
    pub delta_h1: f64,
    pub dist_class_l2: f64,
    pub dist_class_a: f64,
    pub err_e_fit: Option<RateFit>,
}

/// Compares a finished run against a reference pack and appends the result
/// to the run's `summary.json` under `comparisons`.
pub fn compare_reference(run_dir: &Path, pack_path: &Path) -> Result<Comparison> {
    let exp = ExperimentConfig::load(&run_dir.join("config.toml"))?.resolve()?;
    let h = exp.hamiltonian()?;
    let state = ReferencePack::read(&run_dir.join("final_state.txt"))?;
    let pack = ReferencePack::read(pack_path)?;
    let (u, us) = (&state.ustar, &pack.ustar);
    if u.n_nodes() != us.n_nodes() || u.n_orbitals() != us.n_orbitals() {
        return Err(FlowError::Shape(format!(
            "run has {} orbitals on {} nodes, reference has {} on {}",
            u.n_orbitals(),
            u.n_nodes(),
            us.n_orbitals(),
            us.n_nodes()
        )));
    }
    if (u.weight() - us.weight()).abs() > 1e-12 * u.weight() {
        return Err(FlowError::Shape(
            "run and reference live on different grids".into(),
        ));
    }
    let d = subspace_distances(u, us, &h)?;
    let records = run_dir.join("records.csv");
    let err_e_fit = if records.exists() {
        let rows = read_err_e(&records)?;
        let tail: Vec<&(usize, f64)> = rows.iter().skip(1).collect();
        fit_rate_at(
            &tail.iter().map(|r| r.0 as f64).collect::<Vec<_>>(),
            &tail.iter().map(|r| r.1).collect::<Vec<_>>(),
            exp.fit_window,
        )
        .ok()
    } else {
        None
    };
    let cmp = Comparison {
        pack: pack_path.display().to_string(),
        err_i: eigenvalue_errors(&state.lambda, &pack.lambda),
        delta_l2: d.delta_l2,
        delta_h1: d.delta_h1,
        dist_class_l2: d.dist_class_l2,
        dist_class_a: d.dist_class_a,
        err_e_fit,
    };

    let summary_path = run_dir.join("summary.json");
    let mut summary: serde_json::Value = match fs::read_to_string(&summary_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| FlowError::Parse(e.to_string()))?,
        Err(_) => json!({ "schema_version": SCHEMA_VERSION }),
    };
    let entry = serde_json::to_value(&cmp).expect("json");
    match summary.get_mut("comparisons").and_then(|c| c.as_array_mut()) {
        Some(list) => list.push(entry),
        None => summary["comparisons"] = json!([entry]),
    }
    write_file(
        &summary_path,
        &serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        let e = ExperimentConfig::preset(ProblemKind::Oscillator2d)
            .resolve()
            .unwrap();
        assert_eq!(e.cells, vec![128, 128]);
        assert_eq!(e.n_orbitals, 15);
        assert_eq!(e.flow.tau, 0.05);
        let hy = ExperimentConfig::preset(ProblemKind::Hydrogen3d)
            .resolve()
            .unwrap();
        assert_eq!(hy.grid().unwrap().shape(), &[32, 32, 32]);
        assert!(!hy.grid().unwrap().has_node_at_origin());
        assert_eq!(hy.shift, 1.0);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = ExperimentConfig::from_toml("[problem]\nkind = \"oscillator1d\"\ntua = 1.0\n");
        assert!(matches!(err, Err(FlowError::Config(_))));
        let err = ExperimentConfig::from_toml("[problem]\nkind = \"oscillator1d\"\n[flwo]\n");
        assert!(err.is_err());
    }

    #[test]
    fn custom_needs_explicit_fields() {
        let cfg = ExperimentConfig::from_toml("[problem]\nkind = \"custom\"\ncells = [10]\n").unwrap();
        assert!(cfg.resolve().is_err());
        let cfg = ExperimentConfig::from_toml(
            "[problem]\nkind = \"custom\"\nlower = [0.0]\nupper = [1.0]\ncells = [10]\n\
             n_orbitals = 2\npotential = { kind = \"constant\", value = 0.0 }\n",
        )
        .unwrap();
        assert_eq!(cfg.resolve().unwrap().n_orbitals, 2);
    }

    #[test]
    fn invalid_values_are_caught_before_allocation() {
        let mut cfg = ExperimentConfig::preset(ProblemKind::Oscillator1d);
        cfg.problem.cells = Some(vec![1]);
        assert!(cfg.resolve().is_err());
        cfg.problem.cells = Some(vec![1_000_000, 1_000_000]);
        assert!(cfg.resolve().is_err());
        let mut cfg = ExperimentConfig::preset(ProblemKind::Oscillator1d);
        cfg.flow.tau = Some(-1.0);
        assert!(cfg.resolve().is_err());
        let mut cfg = ExperimentConfig::preset(ProblemKind::Oscillator1d);
        cfg.solver.reference = Some(false);
        cfg.flow.stop = Some(StopKind::ReferenceEnergy);
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let e = ExperimentConfig::preset(ProblemKind::Hydrogen3d)
            .resolve()
            .unwrap();
        let text = resolved_config(&e).to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap().resolve().unwrap();
        assert_eq!(back.cells, e.cells);
        assert_eq!(back.potential, e.potential);
        assert_eq!(back.flow.tau, e.flow.tau);
    }

    #[test]
    fn records_header_is_stable() {
        let text = records_csv(&[RunRecord::default()]).unwrap();
        assert_eq!(text.lines().next().unwrap(), RECORDS_HEADER);
        assert_eq!(text.lines().nth(1).unwrap().matches(',').count(), 8);
        assert!(text.lines().nth(1).unwrap().ends_with(",,,"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(FlowError::Config("x".into()).exit_code(), 3);
        assert_eq!(
            FlowError::OrthogonalityAlarm {
                iteration: 1,
                drift: 1.0,
                alarm: 0.1
            }
            .exit_code(),
            4
        );
        assert_eq!(RunStatus::MaxIter.exit_code(), 2);
    }
}
