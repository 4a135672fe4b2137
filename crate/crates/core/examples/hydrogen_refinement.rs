//! Grid refinement for the hydrogen box: how far the discrete levels sit from
//! -1/2 and -1/8 as the mesh is refined. Uses the reference oracle only.
//!
//!     cargo run --release --example hydrogen_refinement -- 17,25,33

use ortho_flow::experiment::{ExperimentConfig, ProblemKind};
use ortho_flow::prelude::*;

fn main() -> ortho_flow::Result<()> {
    let cells: Vec<usize> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "17,25,33".into())
        .split(',')
        .map(|c| c.trim().parse().expect("cell count"))
        .collect();

    println!(
        "{:>6} {:>8} {:>12} {:>12} {:>12}",
        "cells", "h", "lambda_1", "|l1 + 1/2|", "spread 2..5"
    );
    for m in cells {
        let mut cfg = ExperimentConfig::preset(ProblemKind::Hydrogen3d);
        cfg.problem.cells = Some(vec![m; 3]);
        let exp = cfg.resolve()?;
        let h = exp.hamiltonian()?;
        let pack = reference_eigenpairs(&h, 5, OracleMode::Iterative)?;
        let l = &pack.lambda;
        let hi = l[1..5].iter().copied().fold(f64::MIN, f64::max);
        let lo = l[1..5].iter().copied().fold(f64::MAX, f64::min);
        println!(
            "{m:>6} {:>8.4} {:>12.6} {:>12.3e} {:>12.3e}",
            h.grid().spacing()[0],
            l[0],
            (l[0] + 0.5).abs(),
            hi - lo
        );
    }
    Ok(())
}
