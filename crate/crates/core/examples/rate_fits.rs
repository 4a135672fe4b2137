//! Exponential rate fits for err_E and err_U. The energy error should decay
//! about twice as fast as the orbital error.

use ortho_flow::diagnostics::err_u_series;
use ortho_flow::prelude::*;

fn main() -> ortho_flow::Result<()> {
    let grid = TensorGrid::new(BoxDomain::symmetric(8.0, 1)?, &[256])?;
    let h = Hamiltonian::assemble(&grid, &Potential::harmonic(), 0.5, 0.0)?;
    let solver = GreenSolver::new(&h, &SolverConfig::direct())?;

    // A small step keeps the decay slow enough to fit cleanly.
    let mut cfg = FlowConfig::new(3, 0.05);
    cfg.tol = 1e-14;
    let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 3, 2)?;
    let mut snaps = Vec::new();
    let out = run_with(&cfg, &h, &solver, u0, |s, _| {
        snaps.push(s.u.clone());
        Ok(())
    })?;

    let err_e: Vec<f64> = out.history.iter().skip(1).map(|r| r.err_e).collect();
    let err_u = err_u_series(&snaps, &out.state.u)?;
    // Stop well before err_E reaches roundoff and err_U is measured against
    // an iterate that is itself only tol-accurate.
    let keep = err_e.iter().position(|e| *e < 1e-12).unwrap_or(err_e.len());
    let fe = fit_rate(&err_e[..keep], 0.5)?;
    let fu = fit_rate(&err_u[..keep], 0.5)?;
    println!("{} iterations", out.iterations());
    println!("err_E slope {:.4e}  r2 {:.5}", fe.slope, fe.r_squared);
    println!("err_U slope {:.4e}  r2 {:.5}", fu.slope, fu.r_squared);
    println!("ratio {:.3}", fe.slope / fu.slope);
    Ok(())
}
