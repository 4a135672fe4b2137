//! A double well `V(x) = (x^2 - 4)^2 / 8` on a closure potential. The two
//! lowest states form a tunnelling doublet.

use ortho_flow::prelude::*;

fn main() -> ortho_flow::Result<()> {
    let well = Potential::custom(|x: &[f64]| (x[0] * x[0] - 4.0).powi(2) / 8.0);
    let grid = TensorGrid::new(BoxDomain::symmetric(7.0, 1)?, &[400])?;
    let h = Hamiltonian::assemble(&grid, &well, 0.5, 0.0)?;
    let solver = GreenSolver::new(&h, &SolverConfig::direct())?;

    let mut cfg = FlowConfig::new(4, 0.5);
    cfg.tol = 1e-13;
    let u0 = random_orthonormal_init(h.n_nodes(), h.mass_weight(), 4, 7)?;
    let out = run(&cfg, &h, &solver, u0)?;
    let lambda = extract_eigenvalues(&out.state.u, &h, &solver)?;
    let pack = reference_eigenpairs(&h, 4, OracleMode::Dense)?;

    println!("{} iterations", out.iterations());
    for (i, (l, r)) in lambda.iter().zip(&pack.lambda).enumerate() {
        println!("lambda_{} = {l:.10} (oracle {r:.10})", i + 1);
    }
    println!("tunnelling splitting {:.3e}", lambda[1] - lambda[0]);
    Ok(())
}
