use thiserror::Error;

/// Errors raised anywhere in the solver stack.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("potential is not finite at node {node} (x = {coords:?}): {value}")]
    NonFinitePotential {
        node: usize,
        coords: Vec<f64>,
        value: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "matrix is not symmetric positive definite (pivot {pivot} = {value:e}); increase the spectral shift"
    )]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric: asymmetry {asymmetry:e} exceeds {limit:e}")]
    NotSymmetric { asymmetry: f64, limit: f64 },

    #[error(
        "conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})"
    )]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("{routine} did not converge after {sweeps} sweeps")]
    NoConvergence { routine: &'static str, sweeps: usize },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("orthogonality drift {drift:e} exceeds alarm {alarm:e} at iteration {iteration}")]
    OrthogonalityAlarm {
        iteration: usize,
        drift: f64,
        alarm: f64,
    },

    #[error("non-positive Green eigenvalue {0:e}: operator is not SPD under the current shift")]
    NonPositiveGreenEigenvalue(f64),

    #[error("reference solver did not converge: {0}")]
    Reference(String),

    #[error("spectral gap violated: lambda_N = {lambda_n} and lambda_N+1 = {lambda_next} are not separated")]
    DegenerateGap { lambda_n: f64, lambda_next: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("integration blew up at t = {t} (norm {norm:e})")]
    BlowUp { t: f64, norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;
