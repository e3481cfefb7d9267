//! Functional-connectivity graphs: Pearson node features and
//! partial-correlation edges for one view of one patient.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Cohort, RoiTimeSeries, Split, PCD_LEN};
use crate::tensor::Matrix;

/// Largest condition number accepted when inverting a shrunk covariance.
const MAX_CONDITION: f64 = 1e12;

/// Symmetric `R x R` matrix with unit diagonal and entries in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(Matrix);

impl CorrelationMatrix {
    fn from_raw(mut m: Matrix) -> Self {
        let n = m.nrows();
        for a in 0..n {
            for b in (a + 1)..n {
                let v = (0.5 * (m[(a, b)] + m[(b, a)])).clamp(-1.0, 1.0);
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
            m[(a, a)] = 1.0;
        }
        Self(m)
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.0[(a, b)]
    }

    /// Strict upper triangle, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.size();
        (0..n)
            .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
            .map(|ab| self.0[ab])
            .collect()
    }
}

fn centered(view: &RoiTimeSeries) -> Result<Matrix> {
    let x = view.values();
    if x.nrows() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 timepoints, got {}",
            x.nrows()
        )));
    }
    let mut c = x.clone();
    for j in 0..c.ncols() {
        let mean = c.column(j).mean();
        c.column_mut(j).add_scalar_mut(-mean);
    }
    Ok(c)
}

/// Sample Pearson correlation between every pair of ROIs.
pub fn pearson_matrix(view: &RoiTimeSeries) -> Result<CorrelationMatrix> {
    let c = centered(view)?;
    let x = view.values();
    let mut scale = Vec::with_capacity(c.ncols());
    for j in 0..c.ncols() {
        let ss = c.column(j).norm_squared();
        let magnitude = x.column(j).norm_squared().max(1.0);
        if ss <= 1e-24 * magnitude {
            return Err(Error::ConstantColumn { roi: j });
        }
        scale.push(ss.sqrt());
    }
    let gram = c.transpose() * &c;
    let r = Matrix::from_fn(gram.nrows(), gram.ncols(), |a, b| {
        gram[(a, b)] / (scale[a] * scale[b])
    });
    Ok(CorrelationMatrix::from_raw(r))
}

/// Partial correlations from the inverse of the diagonally shrunk sample
/// covariance `(1 - shrinkage) S + shrinkage diag(S)`.
pub fn partial_corr_matrix(view: &RoiTimeSeries, shrinkage: f64) -> Result<CorrelationMatrix> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::invalid(format!("shrinkage {shrinkage} not in [0,1]")));
    }
    let c = centered(view)?;
    let t = c.nrows() as f64;
    let s = (c.transpose() * &c) / (t - 1.0);
    let mut shrunk = &s * (1.0 - shrinkage);
    for i in 0..s.nrows() {
        shrunk[(i, i)] = s[(i, i)];
    }
    let eig = SymmetricEigen::new(shrunk.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularCovariance { condition });
    }
    let precision = shrunk
        .cholesky()
        .ok_or(Error::SingularCovariance { condition })?
        .inverse();
    let n = precision.nrows();
    let rho = Matrix::from_fn(n, n, |a, b| {
        -precision[(a, b)] / (precision[(a, a)] * precision[(b, b)]).sqrt()
    });
    Ok(CorrelationMatrix::from_raw(rho))
}

/// How partial correlations become graph edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgePolicy {
    /// Strongest partners kept per node, by absolute partial correlation.
    pub per_node_top: usize,
    pub shrinkage: f64,
}

impl Default for EdgePolicy {
    fn default() -> Self {
        Self {
            per_node_top: 10,
            shrinkage: 0.1,
        }
    }
}

/// Undirected edge with `i < j` and the signed partial correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// One view's FC graph. Row `r` of `node_features` is the Pearson row of
/// ROI `r` followed by the patient's PCD values.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraph {
    pub node_features: Matrix,
    pub edges: Vec<Edge>,
    pub roi_count: usize,
}

impl ViewGraph {
    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }
}

/// Union over nodes of each node's `top` strongest partners, deduplicated.
/// Ties in |weight| go to the lower index.
pub fn top_partner_edges(partial: &CorrelationMatrix, top: usize) -> Vec<Edge> {
    let n = partial.size();
    let keep = top.min(n.saturating_sub(1));
    let mut pairs = std::collections::BTreeSet::new();
    for a in 0..n {
        let mut partners: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        partners.sort_by(|&x, &y| {
            partial
                .get(a, y)
                .abs()
                .partial_cmp(&partial.get(a, x).abs())
                .unwrap()
                .then(x.cmp(&y))
        });
        for &b in partners.iter().take(keep) {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    pairs
        .into_iter()
        .map(|(i, j)| Edge {
            i,
            j,
            weight: partial.get(i, j),
        })
        .collect()
}

pub fn build_fc_graph(
    view: &RoiTimeSeries,
    pcd: &[f64; PCD_LEN],
    policy: &EdgePolicy,
) -> Result<ViewGraph> {
    let pearson = pearson_matrix(view)?;
    let partial = partial_corr_matrix(view, policy.shrinkage)?;
    let r = view.rois();
    let node_features = Matrix::from_fn(r, r + PCD_LEN, |a, f| {
        if f < r {
            pearson.get(a, f)
        } else {
            pcd[f - r]
        }
    });
    Ok(ViewGraph {
        node_features,
        edges: top_partner_edges(&partial, policy.per_node_top),
        roi_count: r,
    })
}

/// Per-feature z-scoring of PCD, fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PcdScaler {
    mean: [f64; PCD_LEN],
    sd: [f64; PCD_LEN],
}

impl PcdScaler {
    /// Fits on the training patients, or on everyone if none are assigned.
    pub fn fit(cohort: &Cohort) -> Self {
        let mut rows: Vec<&[f64; PCD_LEN]> = cohort
            .patients()
            .iter()
            .filter(|p| p.split == Split::Train)
            .map(|p| &p.pcd)
            .collect();
        if rows.is_empty() {
            rows = cohort.patients().iter().map(|p| &p.pcd).collect();
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; PCD_LEN];
        let mut sd = [1.0; PCD_LEN];
        for k in 0..PCD_LEN {
            mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                sd[k] = var.sqrt();
            }
        }
        Self { mean, sd }
    }

    pub fn transform(&self, pcd: &[f64; PCD_LEN]) -> [f64; PCD_LEN] {
        std::array::from_fn(|k| (pcd[k] - self.mean[k]) / self.sd[k])
    }
}
