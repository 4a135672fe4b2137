//! Same-grid reference eigenpairs in both oracle modes, written to a pack
//! file and read back.

use ortho_flow::prelude::*;

fn main() -> ortho_flow::Result<()> {
    let grid = TensorGrid::new(BoxDomain::symmetric(5.5, 2)?, &[48, 48])?;
    let h = Hamiltonian::assemble(&grid, &Potential::harmonic(), 0.5, 0.0)?;

    let dense = reference_eigenpairs(&h, 6, OracleMode::Dense)?;
    let iter = reference_eigenpairs(&h, 6, OracleMode::Iterative)?;
    for (i, (a, b)) in dense.lambda.iter().zip(&iter.lambda).enumerate() {
        println!(
            "lambda_{} dense {a:.12} iterative {b:.12} diff {:.1e}",
            i + 1,
            (a - b).abs()
        );
    }
    println!(
        "next level {:.6}, max residual {:.1e}",
        iter.lambda_next,
        iter.max_residual()
    );

    let path = std::env::temp_dir().join("oscillator2d_48.ref");
    iter.write(&path)?;
    let back = ReferencePack::read(&path)?;
    assert_eq!(back.lambda, iter.lambda);
    println!("pack round trip ok: {}", path.display());
    Ok(())
}
