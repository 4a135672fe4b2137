//! Lowest three states of the 1D harmonic oscillator.
//!
//!     cargo run --release --example oscillator1d

use ortho_flow::prelude::*;

fn main() -> ortho_flow::Result<()> {
    let grid = TensorGrid::new(BoxDomain::symmetric(8.0, 1)?, &[256])?;
    let h = Hamiltonian::assemble(&grid, &Potential::harmonic(), 0.5, 0.0)?;
    let solver = GreenSolver::new(&h, &SolverConfig::direct())?;

    let cfg = FlowConfig::new(3, 0.5);
    let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 3, 0)?;
    let out = run(&cfg, &h, &solver, u0)?;

    println!(
        "converged: {} after {} iterations",
        out.converged,
        out.iterations()
    );
    for (i, l) in extract_eigenvalues(&out.state.u, &h, &solver)?.iter().enumerate() {
        let exact = i as f64 + 0.5;
        println!(
            "lambda_{} = {l:.8}  (continuum {exact}, diff {:.2e})",
            i + 1,
            l - exact
        );
    }
    Ok(())
}
