//! Distances between an iterate and the reference subspace as a run
//! progresses: largest principal angle in L2 and in the energy norm, and the
//! equivalence-class (Procrustes) distances.

use ortho_flow::prelude::*;

fn main() -> ortho_flow::Result<()> {
    let grid = TensorGrid::new(BoxDomain::symmetric(8.0, 1)?, &[200])?;
    let h = Hamiltonian::assemble(&grid, &Potential::harmonic(), 0.5, 0.0)?;
    let solver = GreenSolver::new(&h, &SolverConfig::direct())?;
    let pack = reference_eigenpairs(&h, 4, OracleMode::Dense)?;

    let mut cfg = FlowConfig::new(4, 0.5);
    cfg.tol = 1e-13;
    let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 4, 11)?;
    println!(
        "{:>4} {:>10} {:>10} {:>10} {:>10}",
        "n", "delta_L2", "delta_H1", "[U]-[U*]", "[U]-[U*]_a"
    );
    run_with(&cfg, &h, &solver, u0, |s, _| {
        if s.n % 20 == 0 {
            let d = subspace_distances(&s.u, &pack.ustar, &h)?;
            println!(
                "{:>4} {:>10.2e} {:>10.2e} {:>10.2e} {:>10.2e}",
                s.n, d.delta_l2, d.delta_h1, d.dist_class_l2, d.dist_class_a
            );
        }
        Ok(())
    })?;
    Ok(())
}
