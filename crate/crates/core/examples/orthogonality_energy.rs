//! Watches the two invariants of the scheme along a 2D run: the energy never
//! goes up and the orbitals stay orthonormal without any re-orthogonalization.

use ortho_flow::prelude::*;

fn main() -> ortho_flow::Result<()> {
    let grid = TensorGrid::new(BoxDomain::symmetric(5.5, 2)?, &[64, 64])?;
    let h = Hamiltonian::assemble(&grid, &Potential::harmonic(), 0.5, 0.0)?;
    let solver = GreenSolver::new(&h, &SolverConfig::direct())?;

    let mut cfg = FlowConfig::new(6, 0.5);
    cfg.tol = 1e-12;
    let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 6, 3)?;

    println!("{:>5} {:>18} {:>12} {:>12}", "n", "energy", "err_E", "ortho");
    let out = run_with(&cfg, &h, &solver, u0, |s, _| {
        if s.n % 10 == 0 {
            println!(
                "{:>5} {:>18.12} {:>12.3e} {:>12.3e}",
                s.n, s.energy.raw, s.err_e, s.ortho_err
            );
        }
        Ok(())
    })?;

    println!(
        "{} iterations, energy increases {}, max ortho error {:.2e}, reorthogonalizations {}",
        out.iterations(),
        out.energy_increases,
        out.max_ortho_err,
        out.reorthogonalizations
    );
    Ok(())
}
