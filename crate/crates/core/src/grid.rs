//! Tensor-product grids on boxes with homogeneous Dirichlet boundary.
//!
//! Only interior nodes carry unknowns. Along axis `i` with `m_i` cells the
//! interior coordinates are `lower_i + (k + 1) * h_i` for `k = 0..m_i - 1`.
//! Flat node indices are lexicographic with the **last** coordinate running
//! fastest, so in 2D the node `(k0, k1)` lives at `k0 * (m_1 - 1) + k1`.

use std::fmt;
use std::sync::Arc;

use crate::error::{FlowError, Result};

/// Default lower cap magnitude for the Coulomb potential.
pub const DEFAULT_COULOMB_CAP: f64 = 1.0e3;

/// Axis-aligned box `(lower, upper)` in 1, 2 or 3 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(FlowError::InvalidGrid(format!(
                "lower has {} entries but upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.is_empty() || lower.len() > 3 {
            return Err(FlowError::InvalidGrid(format!(
                "dimension must be 1, 2 or 3, got {}",
                lower.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(FlowError::InvalidGrid(format!(
                    "axis {i}: need finite lower < upper, got ({lo}, {hi})"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube `(-half_width, half_width)^dim`.
    pub fn symmetric(half_width: f64, dim: usize) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// Interior nodes of a uniform tensor grid on a [`BoxDomain`].
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    domain: BoxDomain,
    cells: Vec<usize>,
    /// Interior nodes per axis, `cells[i] - 1`.
    shape: Vec<usize>,
    spacing: Vec<f64>,
    n_nodes: usize,
}

impl TensorGrid {
    pub fn new(domain: BoxDomain, cells_per_dim: &[usize]) -> Result<Self> {
        if cells_per_dim.len() != domain.dim() {
            return Err(FlowError::InvalidGrid(format!(
                "box is {}-dimensional but {} cell counts were given",
                domain.dim(),
                cells_per_dim.len()
            )));
        }
        if let Some((i, m)) = cells_per_dim.iter().enumerate().find(|(_, &m)| m < 2) {
            return Err(FlowError::InvalidGrid(format!(
                "axis {i} has {m} cell(s); at least 2 are needed for an interior node"
            )));
        }
        let spacing = domain
            .lower
            .iter()
            .zip(&domain.upper)
            .zip(cells_per_dim)
            .map(|((lo, hi), &m)| (hi - lo) / m as f64)
            .collect();
        let shape: Vec<usize> = cells_per_dim.iter().map(|m| m - 1).collect();
        let n_nodes = shape.iter().product();
        Ok(Self {
            domain,
            cells: cells_per_dim.to_vec(),
            shape,
            spacing,
            n_nodes,
        })
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Interior nodes along each axis.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Number of unknowns `N_g`.
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Quadrature weight of every node, `prod(h_i)`.
    pub fn mass_weight(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Flat-index distance between neighbours along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            idx[axis] = flat % self.shape[axis];
            flat /= self.shape[axis];
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.shape).fold(0, |acc, (&k, &n)| acc * n + k)
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.coords_into(flat, &mut x);
        x
    }

    fn coords_into(&self, mut flat: usize, x: &mut [f64]) {
        for axis in (0..self.dim()).rev() {
            let k = flat % self.shape[axis];
            flat /= self.shape[axis];
            x[axis] = self.domain.lower[axis] + (k + 1) as f64 * self.spacing[axis];
        }
    }

    /// True when the box is symmetric about the origin, in which case the
    /// node set is invariant under `x -> -x`.
    pub fn is_mirror_symmetric(&self) -> bool {
        self.domain
            .lower
            .iter()
            .zip(&self.domain.upper)
            .all(|(lo, hi)| (lo + hi).abs() <= 1e-14 * hi.abs().max(1.0))
    }

    /// On a symmetric box a node sits exactly at the origin iff every cell
    /// count is even.
    pub fn has_node_at_origin(&self) -> bool {
        self.is_mirror_symmetric() && self.cells.iter().all(|m| m % 2 == 0)
    }
}

pub type PotentialFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// External potential `V(x)`.
#[derive(Clone)]
pub enum Potential {
    /// `0.5 * scale * |x|^2`.
    Harmonic {
        scale: f64,
    },
    /// `-charge / |x|`, clamped from below at `-cap`.
    Coulomb {
        charge: f64,
        cap: f64,
    },
    Constant(f64),
    Custom(PotentialFn),
}

impl Potential {
    pub fn harmonic() -> Self {
        Potential::Harmonic { scale: 1.0 }
    }

    pub fn coulomb() -> Self {
        Potential::Coulomb {
            charge: 1.0,
            cap: DEFAULT_COULOMB_CAP,
        }
    }

    pub fn custom(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Potential::Custom(Arc::new(f))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Harmonic { scale } => 0.5 * scale * x.iter().map(|v| v * v).sum::<f64>(),
            Potential::Coulomb { charge, cap } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                (-charge / r).max(-cap)
            }
            Potential::Constant(v) => *v,
            Potential::Custom(f) => f(x),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Potential::Harmonic { .. } => "harmonic",
            Potential::Coulomb { .. } => "coulomb",
            Potential::Constant(_) => "constant",
            Potential::Custom(_) => "custom",
        }
    }
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Harmonic { scale } => write!(f, "Harmonic {{ scale: {scale} }}"),
            Potential::Coulomb { charge, cap } => {
                write!(f, "Coulomb {{ charge: {charge}, cap: {cap} }}")
            }
            Potential::Constant(v) => write!(f, "Constant({v})"),
            Potential::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// `V(x_j)` for every interior node in grid order.
pub fn eval_potential(grid: &TensorGrid, pot: &Potential) -> Result<Vec<f64>> {
    let mut x = vec![0.0; grid.dim()];
    (0..grid.n_nodes())
        .map(|j| {
            grid.coords_into(j, &mut x);
            let v = pot.eval(&x);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(FlowError::NonFinitePotential {
                    node: j,
                    coords: x.clone(),
                    value: v,
                })
            }
        })
        .collect()
}
