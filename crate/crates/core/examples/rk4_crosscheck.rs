//! Integrates the continuous flow with classical RK4 and compares against the
//! midpoint scheme. RK4 does not preserve orthogonality, and its drift shrinks
//! like dt^4.

use ortho_flow::diagnostics::integrate_flow_rk4;
use ortho_flow::operator::modified_gram_schmidt;
use ortho_flow::prelude::*;

fn main() -> ortho_flow::Result<()> {
    let grid = TensorGrid::new(BoxDomain::symmetric(8.0, 1)?, &[128])?;
    let h = Hamiltonian::assemble(&grid, &Potential::harmonic(), 0.5, 0.0)?;
    let solver = GreenSolver::new(&h, &SolverConfig::direct())?;
    let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 3, 1)?;

    for dt in [1e-2, 5e-3, 2.5e-3] {
        let u = integrate_flow_rk4(&u0, &h, &solver, dt, 1.0)?;
        println!(
            "dt {dt:.1e}: ||I - <U,U>|| at T=1 = {:.3e}",
            u.orthogonality_error()
        );
    }

    let mut rk = integrate_flow_rk4(&u0, &h, &solver, 1e-2, 200.0)?;
    modified_gram_schmidt(&mut rk)?;
    let mut cfg = FlowConfig::new(3, 0.5);
    cfg.tol = 1e-14;
    let mid = run(&cfg, &h, &solver, u0)?.state.u;
    let d = subspace_distances(&rk, &mid, &h)?;
    println!(
        "RK4 at T=200 vs midpoint fixed point: delta_L2 = {:.2e}",
        d.delta_l2
    );
    Ok(())
}
