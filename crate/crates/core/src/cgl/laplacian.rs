use std::rc::Rc;

use rand::{Rng, SeedableRng};
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fc::ViewGraph;
use crate::tensor::SparseMatrix;

pub const DEFAULT_EIGEN_TOL: f64 = 1e-6;
const MAX_POWER_ITERATIONS: usize = 10_000;
const BLOCK: usize = 8;

/// How the largest Laplacian eigenvalue is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMaxMode {
    /// Power iteration per graph.
    #[default]
    Estimate,
    /// Use the spectral upper bound 2 without estimating.
    FixedTwo,
}

/// Undirected weighted graph with non-negative weights and `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl Topology {
    /// Adjacency weights are the absolute partial correlations.
    pub fn from_view(graph: &ViewGraph) -> Self {
        Self {
            nodes: graph.roi_count,
            edges: graph.edges.iter().map(|e| (e.i, e.j, e.weight.abs())).collect(),
        }
    }

    /// Subgraph induced by `kept` (ascending), relabeled to `0..kept.len()`.
    pub fn induced(&self, kept: &[usize]) -> Self {
        let mut relabel = vec![usize::MAX; self.nodes];
        for (new, &old) in kept.iter().enumerate() {
            relabel[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|(i, j, _)| relabel[*i] != usize::MAX && relabel[*j] != usize::MAX)
            .map(|&(i, j, w)| {
                let (a, b) = (relabel[i], relabel[j]);
                (a.min(b), a.max(b), w)
            })
            .collect();
        Self {
            nodes: kept.len(),
            edges,
        }
    }
}

/// `L = I - D^{-1/2} A D^{-1/2}`. Isolated nodes get `D^{-1/2} = 0`, so
/// their row of `L` is the identity row.
pub fn normalized_laplacian(topology: &Topology) -> SparseMatrix {
    let n = topology.nodes;
    let mut degree = vec![0.0; n];
    for &(i, j, w) in &topology.edges {
        degree[i] += w;
        degree[j] += w;
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
    for &(i, j, w) in &topology.edges {
        let v = -w * inv_sqrt[i] * inv_sqrt[j];
        triplets.push((i, j, v));
        triplets.push((j, i, v));
    }
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// Block power iteration with a Rayleigh-Ritz step, from a fixed-seed start
/// block of up to 8 vectors. Stops once the residual `||L u - lambda u||` of
/// the top Ritz pair is within `tol`; the estimate is clamped to [1, 2] (the
/// trace of a normalized Laplacian is `n`, so its top eigenvalue is at
/// least 1).
pub fn largest_eigenvalue(laplacian: &SparseMatrix, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("eigenvalue tolerance {tol} must be > 0")));
    }
    let n = laplacian.rows();
    if n == 0 {
        return Err(Error::invalid("empty Laplacian"));
    }
    let block = n.min(BLOCK);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let start = DMatrix::from_fn(n, block, |_, _| rng.random_range(0.5..1.5));
    let mut x = start.qr().q();
    for _ in 0..MAX_POWER_ITERATIONS {
        let y = laplacian.mul_dense(&x);
        let h = x.transpose() * &y;
        let eig = ((&h + h.transpose()) * 0.5).symmetric_eigen();
        let top = eig.eigenvalues.imax();
        let lambda = eig.eigenvalues[top];
        let s = eig.eigenvectors.column(top);
        let residual = (&y * s - (&x * s) * lambda).norm();
        if residual <= tol {
            return Ok(lambda.clamp(1.0, 2.0));
        }
        x = y.qr().q();
    }
    Err(Error::NoConvergence(MAX_POWER_ITERATIONS))
}

/// Normalized Laplacian with its top eigenvalue and the rescaled operator
/// `2 L / lambda_max - I` used by the Chebyshev recursion.
#[derive(Debug, Clone)]
pub struct ScaledLaplacian {
    pub topology: Topology,
    pub laplacian: Rc<SparseMatrix>,
    pub lambda_max: f64,
    pub scaled: Rc<SparseMatrix>,
    pub mode: LambdaMaxMode,
}

impl ScaledLaplacian {
    pub fn new(topology: Topology, mode: LambdaMaxMode) -> Result<Self> {
        let laplacian = normalized_laplacian(&topology);
        let lambda_max = match mode {
            LambdaMaxMode::Estimate => largest_eigenvalue(&laplacian, DEFAULT_EIGEN_TOL)?,
            LambdaMaxMode::FixedTwo => 2.0,
        };
        let scaled = laplacian.affine_identity(2.0 / lambda_max, -1.0);
        Ok(Self {
            topology,
            laplacian: Rc::new(laplacian),
            lambda_max,
            scaled: Rc::new(scaled),
            mode,
        })
    }

    pub fn from_view(graph: &ViewGraph, mode: LambdaMaxMode) -> Result<Self> {
        Self::new(Topology::from_view(graph), mode)
    }

    pub fn nodes(&self) -> usize {
        self.topology.nodes
    }

    pub fn induced(&self, kept: &[usize]) -> Result<Self> {
        Self::new(self.topology.induced(kept), self.mode)
    }
}
