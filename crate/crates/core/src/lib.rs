//! Orthogonality-preserving gradient flow for the lowest eigenpairs of
//! `-c Laplacian + V` on a box with zero Dirichlet boundary.
//!
//! The solver evolves an orthonormal block `U` along `dU/dt = -L_U U` with an
//! implicit midpoint step that keeps `<U, U> = I` without ever
//! orthonormalizing inside the loop. Each step needs one application of the
//! Green's operator `(-c Laplacian + V + shift)^{-1}` per orbital.
//!
//! ```no_run
//! use ortho_flow::prelude::*;
//!
//! let grid = TensorGrid::new(BoxDomain::symmetric(8.0, 1)?, &[256])?;
//! let h = Hamiltonian::assemble(&grid, &Potential::harmonic(), 0.5, 0.0)?;
//! let solver = GreenSolver::new(&h, &SolverConfig::default())?;
//! let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 3, 0)?;
//! let out = run(&FlowConfig::new(3, 0.5), &h, &solver, u0)?;
//! let lambda = extract_eigenvalues(&out.state.u, &h, &solver)?;
//! # Ok::<(), ortho_flow::FlowError>(())
//! ```

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod grid;
pub mod operator;
pub mod oracle;
pub mod smallmat;

pub use error::{FlowError, Result};

pub mod prelude {
    pub use crate::diagnostics::{fit_rate, subspace_distances, RateFit, RunRecord};
    pub use crate::error::{FlowError, Result};
    pub use crate::flow::{
        extract_eigenvalues, random_orthonormal_init, run, run_with, step, FlowConfig, FlowOutcome,
        FlowState, StopRule,
    };
    pub use crate::grid::{BoxDomain, Potential, TensorGrid};
    pub use crate::operator::{
        apply_green, energy, Backend, GreenSolver, Hamiltonian, OrbitalSet, SolverConfig,
    };
    pub use crate::oracle::{reference_eigenpairs, OracleMode, ReferencePack};
}
