//! Step-size sweep through the experiment layer. Writes one run directory per
//! tau plus `table.csv` under the given output directory.
//!
//!     cargo run --release --example tau_sweep -- /tmp/sweep
//!
//! Near the solution the step acts like explicit Euler on the error with
//! factors `1 - tau (1/lambda_i - 1/lambda_j)`. Larger steps help until
//! `tau` gets close to `2 lambda_1` (here 1.0), where the factor for orbital 1
//! against the top of the spectrum approaches -1 and the run stalls.

use std::path::PathBuf;

use ortho_flow::experiment::{sweep_tau, ExperimentConfig, ProblemKind};

fn main() -> ortho_flow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    let exp = ExperimentConfig::preset(ProblemKind::Oscillator1d).resolve()?;
    let taus = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9];
    let reports = sweep_tau(&exp, &taus, &out)?;

    println!("{:>6} {:>8} {:>12}", "tau", "iters", "max err_i");
    for (tau, r) in taus.iter().zip(&reports) {
        let worst = r
            .err_i
            .as_ref()
            .map_or(f64::NAN, |e| e.iter().copied().fold(0.0, f64::max));
        println!("{tau:>6} {:>8} {worst:>12.2e}", r.outcome.iterations());
    }
    println!("table: {}", out.join(&exp.dir).join("table.csv").display());
    Ok(())
}
