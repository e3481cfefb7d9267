use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::laplacian::{LambdaMaxMode, ScaledLaplacian};
use crate::error::{Error, Result};
use crate::fc::ViewGraph;
use crate::tensor::{Bindings, Matrix, ParamStore, Tape, Var};

/// Shape and pooling settings of the spectral encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output widths of the two Chebyshev blocks.
    pub hidden: [usize; 2],
    pub embed_dim: usize,
    /// Fraction of nodes each top-K pooling keeps.
    pub pool_ratio: f64,
    /// Chebyshev filter size.
    pub cheb_k: usize,
    pub lambda_max: LambdaMaxMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: [64, 64],
            embed_dim: 64,
            pool_ratio: 0.5,
            cheb_k: 3,
            lambda_max: LambdaMaxMode::Estimate,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.embed_dim == 0 {
            return Err(Error::config("encoder.hidden", "widths must be positive"));
        }
        if !(self.pool_ratio > 0.0 && self.pool_ratio <= 1.0) {
            return Err(Error::config("encoder.pool_ratio", "must be in (0, 1]"));
        }
        if self.cheb_k == 0 {
            return Err(Error::config("encoder.cheb_k", "must be >= 1"));
        }
        Ok(())
    }
}

/// A view graph ready for encoding: node features plus its Laplacian.
#[derive(Debug, Clone)]
pub struct PreparedView {
    pub features: Matrix,
    pub laplacian: ScaledLaplacian,
}

impl PreparedView {
    pub fn new(graph: &ViewGraph, mode: LambdaMaxMode) -> Result<Self> {
        Ok(Self {
            features: graph.node_features.clone(),
            laplacian: ScaledLaplacian::from_view(graph, mode)?,
        })
    }
}

pub fn theta_name(block: usize, k: usize) -> String {
    format!("block{block}.theta{k}")
}

pub fn pool_name(block: usize) -> String {
    format!("block{block}.pool")
}

pub const READOUT: &str = "readout";

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

/// Learnable parameters of the two-block encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams(pub ParamStore);

impl EncoderParams {
    pub fn init(feature_dim: usize, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [feature_dim, cfg.hidden[0], cfg.hidden[1]];
        for block in 1..=2 {
            let (fin, fout) = (widths[block - 1], widths[block]);
            for k in 1..=cfg.cheb_k {
                store.insert(theta_name(block, k), glorot(&mut rng, fin, fout))?;
            }
            store.insert(pool_name(block), glorot(&mut rng, fout, 1))?;
        }
        store.insert(READOUT, glorot(&mut rng, 2 * cfg.hidden[1], cfg.embed_dim))?;
        Ok(Self(store))
    }

    pub fn store(&self) -> &ParamStore {
        &self.0
    }
}

/// `sum_k Z_k(V) theta_k` with `Z_1 = V`, `Z_2 = L~ V`,
/// `Z_k = 2 L~ Z_{k-1} - Z_{k-2}`.
pub fn chebyshev_conv(tape: &Tape, v: Var, lap: &ScaledLaplacian, thetas: &[Var]) -> Result<Var> {
    if thetas.is_empty() {
        return Err(Error::invalid("Chebyshev filter needs at least one weight"));
    }
    let (rows, _) = tape.shape(v);
    if rows != lap.nodes() {
        return Err(Error::Shape {
            op: "chebyshev_conv",
            lhs: (lap.nodes(), lap.nodes()),
            rhs: tape.shape(v),
        });
    }
    let mut out = tape.matmul(v, thetas[0])?;
    let mut prev = v;
    let mut cur = v;
    for (k, &theta) in thetas.iter().enumerate().skip(1) {
        let next = if k == 1 {
            tape.spmm(lap.scaled.clone(), v)?
        } else {
            let lz = tape.spmm(lap.scaled.clone(), cur)?;
            tape.sub(tape.scale(lz, 2.0), prev)?
        };
        prev = cur;
        cur = next;
        out = tape.add(out, tape.matmul(cur, theta)?)?;
    }
    Ok(out)
}

/// Plain-matrix form of [`chebyshev_conv`].
pub fn chebyshev_conv_matrix(v: &Matrix, lap: &ScaledLaplacian, thetas: &[Matrix]) -> Result<Matrix> {
    let tape = Tape::new();
    let vv = tape.constant(v.clone());
    let tv: Vec<Var> = thetas.iter().map(|t| tape.constant(t.clone())).collect();
    let out = chebyshev_conv(&tape, vv, lap, &tv)?;
    Ok(tape.value(out))
}

/// Indices of the `keep` largest scores (ties to the lower index), ascending.
pub fn select_top(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

pub struct Pooled {
    pub features: Var,
    pub laplacian: ScaledLaplacian,
    pub kept: Vec<usize>,
}

/// Scores nodes by `V p / ||p||`, keeps the top `ceil(ratio * R)` and gates
/// the survivors by `tanh(score)`. The Laplacian of the induced subgraph is
/// recomputed.
pub fn topk_pool(tape: &Tape, v: Var, lap: &ScaledLaplacian, p: Var, ratio: f64) -> Result<Pooled> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("pooling ratio {ratio} not in (0,1]")));
    }
    let rows = tape.shape(v).0;
    if rows == 0 {
        return Err(Error::invalid("cannot pool an empty graph"));
    }
    let norm = tape.sqrt(tape.sum(tape.mul(p, p)?));
    let raw = tape.matmul(v, p)?;
    let scores = tape.matmul(raw, tape.recip(norm))?;
    let keep = ((ratio * rows as f64).ceil() as usize).clamp(1, rows);
    let values: Vec<f64> = tape.with_value(scores, |s| s.iter().copied().collect());
    let kept = select_top(&values, keep);
    let idx: Rc<[usize]> = Rc::from(kept.clone());
    let gate = tape.tanh(tape.gather_rows(scores, idx.clone())?);
    let features = tape.mul_col(tape.gather_rows(v, idx)?, gate)?;
    Ok(Pooled {
        features,
        laplacian: lap.induced(&kept)?,
        kept,
    })
}

/// Records the encoder forward pass for one view; returns a `1 x d` unit
/// row vector.
pub fn encode_on_tape(
    tape: &Tape,
    params: &Bindings,
    view: &PreparedView,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let mut x = tape.constant(view.features.clone());
    let mut lap = view.laplacian.clone();
    for block in 1..=2 {
        let thetas = (1..=cfg.cheb_k)
            .map(|k| params.get(&theta_name(block, k)))
            .collect::<Result<Vec<_>>>()?;
        let h = tape.relu(chebyshev_conv(tape, x, &lap, &thetas)?);
        let pooled = topk_pool(tape, h, &lap, params.get(&pool_name(block))?, cfg.pool_ratio)?;
        x = pooled.features;
        lap = pooled.laplacian;
    }
    let readout = tape.concat_cols(tape.mean_rows(x)?, tape.max_rows(x)?)?;
    let z = tape.matmul(readout, params.get(READOUT)?)?;
    l2_normalize_rows(tape, z)
}

/// Divides each row by its Euclidean norm (with a 1e-24 floor on the
/// squared norm).
pub fn l2_normalize_rows(tape: &Tape, z: Var) -> Result<Var> {
    let sq = tape.sum_cols(tape.mul(z, z)?);
    let inv = tape.recip(tape.sqrt(tape.shift(sq, 1e-24)));
    tape.mul_col(z, inv)
}

/// Embedding of one view under fixed parameters.
pub fn encode(view: &PreparedView, params: &EncoderParams, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let b = params.store().bind(&tape);
    let out = encode_on_tape(&tape, &b, view, cfg)?;
    Ok(tape.value(out).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgl::laplacian::Topology;

    #[test]
    fn edgeless_filter_sums_weights() {
        let lap = ScaledLaplacian::new(Topology { nodes: 3, edges: vec![] }, LambdaMaxMode::Estimate).unwrap();
        let v = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 - 1.5);
        let thetas: Vec<Matrix> = (0..3)
            .map(|k| Matrix::from_fn(2, 2, |i, j| (k + i + j) as f64 * 0.5 - 0.7))
            .collect();
        let out = chebyshev_conv_matrix(&v, &lap, &thetas).unwrap();
        let expected = &v * (&thetas[0] + &thetas[1] + &thetas[2]);
        assert!((out - expected).amax() < 1e-12);
    }

    #[test]
    fn identity_filter() {
        let lap = ScaledLaplacian::new(
            Topology { nodes: 3, edges: vec![(0, 1, 0.5), (1, 2, 0.2)] },
            LambdaMaxMode::Estimate,
        )
        .unwrap();
        let v = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let thetas = [Matrix::identity(2, 2), Matrix::zeros(2, 2), Matrix::zeros(2, 2)];
        assert_eq!(chebyshev_conv_matrix(&v, &lap, &thetas).unwrap(), v);
    }

    #[test]
    fn top_selection() {
        assert_eq!(select_top(&[3.0, 1.0, 2.0, 0.0], 2), vec![0, 2]);
        assert_eq!(select_top(&[1.0, 1.0, 1.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn full_ratio_keeps_all_and_gates() {
        let lap = ScaledLaplacian::new(Topology { nodes: 3, edges: vec![(0, 2, 1.0)] }, LambdaMaxMode::Estimate)
            .unwrap();
        let tape = Tape::new();
        let vm = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, -1.0, 1.0]);
        let v = tape.constant(vm.clone());
        let p = tape.constant(Matrix::from_row_slice(2, 1, &[3.0, 4.0]));
        let pooled = topk_pool(&tape, v, &lap, p, 1.0).unwrap();
        assert_eq!(pooled.kept, vec![0, 1, 2]);
        let scores = [0.6, 1.6, 0.2];
        let out = tape.value(pooled.features);
        for i in 0..3 {
            for j in 0..2 {
                assert!((out[(i, j)] - vm[(i, j)] * f64::tanh(scores[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_ratio_pools_by_score() {
        let lap = ScaledLaplacian::new(
            Topology { nodes: 4, edges: vec![(0, 1, 1.0), (0, 2, 1.0), (2, 3, 1.0)] },
            LambdaMaxMode::Estimate,
        )
        .unwrap();
        let tape = Tape::new();
        let v = tape.constant(Matrix::from_row_slice(4, 1, &[3.0, 1.0, 2.0, 0.0]));
        let p = tape.constant(Matrix::from_element(1, 1, 1.0));
        let pooled = topk_pool(&tape, v, &lap, p, 0.5).unwrap();
        assert_eq!(pooled.kept, vec![0, 2]);
        assert_eq!(pooled.laplacian.topology.edges, vec![(0, 1, 1.0)]);
    }
}
