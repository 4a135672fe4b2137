//! Hydrogen in a box with a shifted Coulomb Hamiltonian.
//!
//!     cargo run --release --example hydrogen -- 33
//!
//! The argument is the number of cells per axis (odd, so no node sits on the
//! nucleus). The flow runs on `H + 1`; eigenvalues are reported shift-corrected.

use ortho_flow::experiment::{run_experiment, ExperimentConfig, ProblemKind};

fn main() -> ortho_flow::Result<()> {
    let cells: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(17);
    let mut cfg = ExperimentConfig::preset(ProblemKind::Hydrogen3d);
    cfg.problem.cells = Some(vec![cells; 3]);
    cfg.output.dir = Some(format!("hydrogen_{cells}"));
    let report = run_experiment(&cfg.resolve()?, &std::env::temp_dir())?;

    println!(
        "{} cells/axis: {} iterations, converged {}, {:.1}s",
        cells,
        report.outcome.iterations(),
        report.outcome.converged,
        report.wall_time_s
    );
    let exact = [-0.5, -0.125, -0.125, -0.125, -0.125];
    for (i, l) in report.eigenvalues.iter().enumerate() {
        let err = report.err_i.as_ref().map_or(f64::NAN, |e| e[i]);
        println!(
            "lambda_{} = {l:+.6}  continuum {:+.4}  err vs same-grid oracle {err:.1e}",
            i + 1,
            exact[i]
        );
    }
    println!("output in {}", report.run_dir.display());
    Ok(())
}
