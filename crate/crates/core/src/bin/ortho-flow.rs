//! Command-line front end. Config format: see `ortho_flow::experiment`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ortho_flow::experiment::{
    compare_reference, run_experiment, sweep_tau, write_reference, Experiment, ExperimentConfig,
};
use ortho_flow::FlowError;

/// Orthogonality-preserving gradient flow eigensolver.
///
/// Configs are TOML files with [problem], [solver], [flow] and [output]
/// tables; `problem.kind` picks a preset (oscillator1d, oscillator2d,
/// hydrogen3d) or `custom`. ORTHO_FLOW_THREADS caps the worker threads.
///
/// Exit codes: 0 converged, 2 max_iter reached, 3 invalid input, 4 numerical
/// abort.
#[derive(Parser)]
#[command(version, about, long_about)]
struct Cli {
    /// Directory all outputs are written under.
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run one experiment per time step and tabulate err_i.
    SweepTau {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        taus: Vec<f64>,
    },
    /// Compute and store the reference eigenpairs for a config.
    Reference { config: PathBuf },
    /// Compare a finished run against a reference pack.
    Compare { run_dir: PathBuf, pack: PathBuf },
}

fn load(path: &Path) -> Result<Experiment, FlowError> {
    ExperimentConfig::load(path)?.resolve()
}

fn init_threads() -> Result<(), FlowError> {
    let Ok(v) = std::env::var("ORTHO_FLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        FlowError::Config(format!(
            "ORTHO_FLOW_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| FlowError::Config(e.to_string()))
}

fn execute(cli: &Cli) -> Result<i32, FlowError> {
    init_threads()?;
    let out = &cli.output_dir;
    match &cli.command {
        Command::Run { config } => {
            let r = run_experiment(&load(config)?, out)?;
            println!(
                "{:?} after {} iterations; results in {}",
                r.status,
                r.outcome.iterations(),
                r.run_dir.display()
            );
            for (i, l) in r.eigenvalues.iter().enumerate() {
                match &r.err_i {
                    Some(e) => println!("lambda_{} = {l:.12}  err = {:.3e}", i + 1, e[i]),
                    None => println!("lambda_{} = {l:.12}", i + 1),
                }
            }
            Ok(r.status.exit_code())
        }
        Command::SweepTau { config, taus } => {
            let reports = sweep_tau(&load(config)?, taus, out)?;
            for r in &reports {
                println!(
                    "tau = {}: {:?} after {} iterations",
                    r.experiment.flow.tau,
                    r.status,
                    r.outcome.iterations()
                );
            }
            Ok(reports.iter().map(|r| r.status.exit_code()).max().unwrap_or(0))
        }
        Command::Reference { config } => {
            let (pack, path) = write_reference(&load(config)?, out)?;
            for (i, l) in pack.lambda.iter().enumerate() {
                println!("lambda_{} = {l:.12}  residual = {:.3e}", i + 1, pack.residuals[i]);
            }
            println!("reference written to {}", path.display());
            Ok(0)
        }
        Command::Compare { run_dir, pack } => {
            let c = compare_reference(&out.join(run_dir), &out.join(pack))?;
            println!(
                "delta_L2 = {:.3e}  dist_class_a = {:.3e}  max err_i = {:.3e}",
                c.delta_l2,
                c.dist_class_a,
                c.err_i.iter().copied().fold(0.0, f64::max)
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as invalid input; exit code 2 means max_iter.
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
