//! Transductive patient classification on a population graph whose edges
//! are rebuilt by k-nearest-neighbour search before every edge convolution.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgl::train::csv_error;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::ingest::Split;
use crate::tensor::{adam_step, forward_backward, Bindings, Matrix, ParamStore, Tape, Var};

const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgcConfig {
    /// Neighbours per node; clamped to `P - 1`.
    pub k: usize,
    /// Focal loss exponent.
    pub gamma: f64,
    pub hidden: usize,
    pub aggregation: Aggregation,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for DgcConfig {
    fn default() -> Self {
        Self {
            k: 20,
            gamma: 2.0,
            hidden: 64,
            aggregation: Aggregation::Sum,
            epochs: 150,
            lr: 0.005,
        }
    }
}

impl DgcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("dgc.k", "must be >= 1"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("dgc.gamma", "must be >= 0"));
        }
        if self.hidden == 0 {
            return Err(Error::config("dgc.hidden", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("dgc.lr", "must be >= 0"));
        }
        Ok(())
    }

    pub fn effective_k(&self, nodes: usize) -> usize {
        self.k.min(nodes.saturating_sub(1))
    }
}

/// Patient nodes with their features, labels and split membership.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationGraph {
    pub features: Matrix,
    pub labels: Vec<u8>,
    pub splits: Vec<Split>,
}

impl PopulationGraph {
    pub fn new(features: Matrix, labels: Vec<u8>, splits: Vec<Split>) -> Result<Self> {
        let p = features.nrows();
        if labels.len() != p || splits.len() != p {
            return Err(Error::invalid(format!(
                "population graph has {p} nodes but {} labels and {} splits",
                labels.len(),
                splits.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("label {bad} not in {{0,1}}")));
        }
        Ok(Self { features, labels, splits })
    }

    pub fn nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.nodes()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Unit-length mean of a patient's view embeddings.
pub fn patient_embedding(views: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = views
        .first()
        .ok_or_else(|| Error::invalid("patient has no view embeddings"))?;
    let d = first.len();
    if views.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("view embeddings differ in length"));
    }
    let mut mean = vec![0.0; d];
    for v in views {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / views.len() as f64;
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(Error::ZeroNorm("aggregate of view embeddings".into()));
    }
    Ok(mean.into_iter().map(|x| x / norm).collect())
}

/// Directed edges `i -> j` from every node to its `k` nearest neighbours by
/// Euclidean distance. Ties go to the lower index.
pub fn knn_edges(features: &Matrix, k: usize) -> Result<Vec<(usize, usize)>> {
    let p = features.nrows();
    if k == 0 || k >= p {
        return Err(Error::invalid(format!("k = {k} must be in [1, {}]", p.saturating_sub(1))));
    }
    let mut edges = Vec::with_capacity(p * k);
    for i in 0..p {
        let mut dist: Vec<(f64, usize)> = (0..p)
            .filter(|&j| j != i)
            .map(|j| ((features.row(i) - features.row(j)).norm_squared(), j))
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        edges.extend(dist.iter().take(k).map(|&(_, j)| (i, j)));
    }
    Ok(edges)
}

/// Weights of the per-edge map `phi = linear -> relu -> linear`.
#[derive(Debug, Clone, Copy)]
pub struct EdgeMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EdgeMlp {
    fn bind(b: &Bindings, layer: usize) -> Result<Self> {
        Ok(Self {
            w1: b.get(&format!("edge{layer}.w1"))?,
            b1: b.get(&format!("edge{layer}.b1"))?,
            w2: b.get(&format!("edge{layer}.w2"))?,
            b2: b.get(&format!("edge{layer}.b2"))?,
        })
    }
}

/// Row `i` aggregates `phi(x_i || x_m - x_i)` over the out-edges `i -> m`.
pub fn edge_conv(
    tape: &Tape,
    x: Var,
    edges: &[(usize, usize)],
    phi: &EdgeMlp,
    aggregation: Aggregation,
) -> Result<Var> {
    let n = tape.shape(x).0;
    let mut has_edge = vec![false; n];
    for &(i, m) in edges {
        if i >= n || m >= n {
            return Err(Error::invalid(format!("edge ({i}, {m}) out of range for {n} nodes")));
        }
        has_edge[i] = true;
    }
    if let Some(lonely) = has_edge.iter().position(|&h| !h) {
        return Err(Error::IsolatedNode(lonely));
    }
    let src: Rc<[usize]> = edges.iter().map(|e| e.0).collect();
    let dst: Rc<[usize]> = edges.iter().map(|e| e.1).collect();
    let xi = tape.gather_rows(x, src.clone())?;
    let xm = tape.gather_rows(x, dst)?;
    let input = tape.concat_cols(xi, tape.sub(xm, xi)?)?;
    let h = tape.relu(tape.add_row(tape.matmul(input, phi.w1)?, phi.b1)?);
    let out = tape.add_row(tape.matmul(h, phi.w2)?, phi.b2)?;
    match aggregation {
        Aggregation::Sum => tape.scatter_add_rows(out, src, n),
        Aggregation::Max => tape.segment_max(out, &src, n),
    }
}

/// `-(1 - p)^gamma ln p` with `p` floored at 1e-12.
pub fn focal_loss(prob: f64, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma {gamma} must be >= 0")));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::invalid(format!("probability {prob} not in [0, 1]")));
    }
    let p = prob.max(1e-12);
    Ok(-(1.0 - p).powf(gamma) * p.ln())
}

/// Mean focal loss over `nodes`, from `P x 2` log-probabilities.
pub fn focal_loss_on_tape(
    tape: &Tape,
    log_probs: Var,
    labels: &[u8],
    nodes: &[usize],
    gamma: f64,
) -> Result<Var> {
    if nodes.is_empty() {
        return Err(Error::invalid("focal loss over an empty node set"));
    }
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma {gamma} must be >= 0")));
    }
    let idx: Rc<[usize]> = Rc::from(nodes);
    let lp = tape.gather_rows(log_probs, idx)?;
    let onehot = Matrix::from_fn(nodes.len(), 2, |r, c| {
        if labels[nodes[r]] as usize == c { 1.0 } else { 0.0 }
    });
    let lpt = tape.clamp_min(tape.sum_cols(tape.mul(lp, tape.constant(onehot))?), LOG_FLOOR);
    let weight = tape.powf(tape.shift(tape.scale(tape.exp(lpt), -1.0), 1.0), gamma);
    Ok(tape.scale(tape.sum(tape.mul(weight, lpt)?), -1.0 / nodes.len() as f64))
}

/// Row-wise log-softmax with a detached max shift.
pub fn log_softmax_rows(tape: &Tape, logits: Var) -> Result<Var> {
    let (r, c) = tape.shape(logits);
    let shift = tape.with_value(logits, |l| {
        Matrix::from_fn(r, c, |i, _| l.row(i).max())
    });
    let z = tape.sub(logits, tape.constant(shift))?;
    let lse = tape.log(tape.sum_cols(tape.exp(z)));
    let spread = tape.matmul(lse, tape.constant(Matrix::from_element(1, c, 1.0)))?;
    tape.sub(z, spread)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgcParams(pub ParamStore);

impl DgcParams {
    pub fn init(input_dim: usize, cfg: &DgcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
        };
        let h = cfg.hidden;
        // Summing k messages multiplies their scale by k.
        let fan = match cfg.aggregation {
            Aggregation::Sum => cfg.k as f64,
            Aggregation::Max => 1.0,
        };
        let mut store = ParamStore::new();
        for (layer, fin) in [(1, input_dim), (2, h)] {
            store.insert(format!("edge{layer}.w1"), glorot(2 * fin, h))?;
            store.insert(format!("edge{layer}.b1"), Matrix::zeros(1, h))?;
            store.insert(format!("edge{layer}.w2"), glorot(h, h) / fan)?;
            store.insert(format!("edge{layer}.b2"), Matrix::zeros(1, h))?;
        }
        store.insert("head.w", glorot(h, 2))?;
        store.insert("head.b", Matrix::zeros(1, 2))?;
        Ok(Self(store))
    }

    pub fn store(&self) -> &ParamStore {
        &self.0
    }
}

/// Output of one recorded forward pass.
pub struct DgcOutput {
    pub log_probs: Var,
    pub hidden: Var,
    /// KNN edges used by each layer.
    pub edges: [Vec<(usize, usize)>; 2],
}

/// Records the two edge-convolution layers and the head. With `frozen` the
/// given edges replace the KNN rebuilds.
pub fn dgc_forward_on_tape(
    tape: &Tape,
    params: &Bindings,
    features: &Matrix,
    cfg: &DgcConfig,
    frozen: Option<&[Vec<(usize, usize)>; 2]>,
) -> Result<DgcOutput> {
    let k = cfg.effective_k(features.nrows());
    let x = tape.constant(features.clone());
    let e1 = match frozen {
        Some(f) => f[0].clone(),
        None => knn_edges(features, k)?,
    };
    let h1 = edge_conv(tape, x, &e1, &EdgeMlp::bind(params, 1)?, cfg.aggregation)?;
    let e2 = match frozen {
        Some(f) => f[1].clone(),
        None => tape.with_value(h1, |v| knn_edges(v, k))?,
    };
    let h2 = edge_conv(tape, h1, &e2, &EdgeMlp::bind(params, 2)?, cfg.aggregation)?;
    let logits = tape.add_row(tape.matmul(h2, params.get("head.w")?)?, params.get("head.b")?)?;
    Ok(DgcOutput {
        log_probs: log_softmax_rows(tape, logits)?,
        hidden: h2,
        edges: [e1, e2],
    })
}

/// Class probabilities (`P x 2`) and the second-layer node features.
pub fn dgc_forward(pop: &PopulationGraph, params: &DgcParams, cfg: &DgcConfig) -> Result<(Matrix, Matrix)> {
    let tape = Tape::new();
    let b = params.store().bind(&tape);
    let out = dgc_forward_on_tape(&tape, &b, &pop.features, cfg, None)?;
    let probs = tape.value(out.log_probs).map(f64::exp);
    Ok((probs, tape.value(out.hidden)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgcEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the validation split is empty.
    pub val_loss: f64,
    /// NaN unless the validation split holds both classes.
    pub val_auc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DgcHistory {
    pub epochs: Vec<DgcEpoch>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl DgcHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["epoch", "train_loss", "val_loss", "val_auc", "selected"])
            .map_err(|e| csv_error(path, e))?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.val_auc.to_string(),
                u8::from(e.epoch == self.best_epoch).to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Full-graph training on the train split. Returns the parameters with the
/// lowest validation focal loss, or the final ones without a validation
/// split. Labels outside train and val are never read.
pub fn train_dgc(pop: &PopulationGraph, cfg: &DgcConfig, seed: u64) -> Result<(DgcParams, DgcHistory)> {
    cfg.validate()?;
    let train = pop.indices(Split::Train);
    let val = pop.indices(Split::Val);
    if train.is_empty() {
        return Err(Error::invalid("DGC training needs at least one training node"));
    }
    if pop.nodes() < 2 {
        return Err(Error::invalid("population graph needs at least 2 nodes"));
    }
    let mut params = DgcParams::init(pop.features.ncols(), cfg, seed)?;
    let mut history = DgcHistory::default();
    let val_labels: Vec<u8> = val.iter().map(|&i| pop.labels[i]).collect();
    // Ranked by validation AUC, then by validation loss.
    let mut best: Option<((f64, f64), DgcParams)> = None;

    for epoch in 0..cfg.epochs {
        let (mut val_loss, mut val_auc) = (f64::NAN, f64::NAN);
        let (loss, grads) = forward_backward(params.store(), |tape, b| {
            let out = dgc_forward_on_tape(tape, b, &pop.features, cfg, None)?;
            if !val.is_empty() {
                let v = focal_loss_on_tape(tape, out.log_probs, &pop.labels, &val, cfg.gamma)?;
                val_loss = tape.scalar(v)?;
                let lp = tape.value(out.log_probs);
                let scores: Vec<f64> = val.iter().map(|&i| lp[(i, 1)].exp()).collect();
                val_auc = auc(&scores, &val_labels).unwrap_or(f64::NAN);
            }
            focal_loss_on_tape(tape, out.log_probs, &pop.labels, &train, cfg.gamma)
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("focal loss at epoch {epoch}")));
        }
        history.epochs.push(DgcEpoch { epoch, train_loss: loss, val_loss, val_auc });
        let key = (if val_auc.is_finite() { val_auc } else { 0.0 }, -val_loss);
        if val_loss.is_finite() && best.as_ref().is_none_or(|(b, _)| key > *b) {
            best = Some((key, params.clone()));
            history.best_epoch = epoch;
        }
        adam_step(&mut params.0, &grads, cfg.lr)
            .map_err(|e| Error::NonFinite(format!("epoch {epoch}: {e}")))?;
    }
    match best {
        Some((_, p)) => Ok((p, history)),
        None => {
            history.best_epoch = cfg.epochs;
            Ok((params, history))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patient_embedding_examples() {
        let same = patient_embedding(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        assert!((same[0] - 0.6).abs() < 1e-15 && (same[1] - 0.8).abs() < 1e-15);
        let e = patient_embedding(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e[0] - h).abs() < 1e-15 && (e[1] - h).abs() < 1e-15);
        assert!(matches!(
            patient_embedding(&[vec![1.0, 0.0], vec![-1.0, 0.0]]),
            Err(Error::ZeroNorm(_))
        ));
        assert!(patient_embedding(&[]).is_err());
    }

    #[test]
    fn knn_on_a_line() {
        let f = Matrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]);
        assert_eq!(knn_edges(&f, 1).unwrap(), vec![(0, 1), (1, 0), (2, 1)]);
        assert!(knn_edges(&f, 3).is_err());
        assert!(knn_edges(&f, 0).is_err());
        let dup = Matrix::from_column_slice(3, 1, &[5.0, 5.0, 5.0]);
        assert_eq!(knn_edges(&dup, 1).unwrap(), vec![(0, 1), (1, 0), (2, 0)]);
    }

    #[test]
    fn focal_examples() {
        assert!((focal_loss(0.5, 2.0).unwrap() - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(focal_loss(1.0, 2.0).unwrap(), 0.0);
        assert!((focal_loss(0.3, 0.0).unwrap() + 0.3f64.ln()).abs() < 1e-15);
        assert!(focal_loss(0.3, -1.0).is_err());
    }

    #[test]
    fn difference_projection() {
        // phi picks the difference slot: w1 = [0; I], w2 = I, no bias.
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]));
        let phi = EdgeMlp {
            w1: tape.constant(Matrix::from_column_slice(2, 2, &[0.0, 1.0, 0.0, -1.0])),
            b1: tape.constant(Matrix::zeros(1, 2)),
            w2: tape.constant(Matrix::from_column_slice(2, 1, &[1.0, -1.0])),
            b2: tape.constant(Matrix::zeros(1, 1)),
        };
        let edges = knn_edges(&tape.value(x), 1).unwrap();
        let out = edge_conv(&tape, x, &edges, &phi, Aggregation::Sum).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[1.0, -1.0, -2.0]);
    }

    #[test]
    fn isolated_node_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::zeros(3, 1));
        let phi = EdgeMlp {
            w1: tape.constant(Matrix::zeros(2, 1)),
            b1: tape.constant(Matrix::zeros(1, 1)),
            w2: tape.constant(Matrix::zeros(1, 1)),
            b2: tape.constant(Matrix::zeros(1, 1)),
        };
        let r = edge_conv(&tape, x, &[(0, 1), (1, 0)], &phi, Aggregation::Max);
        assert!(matches!(r, Err(Error::IsolatedNode(2))));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Matrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let pop = PopulationGraph::new(f, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], vec![Split::Train; 10]).unwrap();
        let cfg = DgcConfig { k: 3, hidden: 8, ..Default::default() };
        let params = DgcParams::init(4, &cfg, 1).unwrap();
        let (p, _) = dgc_forward(&pop, &params, &cfg).unwrap();
        for r in p.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let (q, _) = dgc_forward(&pop, &params, &cfg).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn identical_features_give_identical_rows() {
        let pop = PopulationGraph::new(Matrix::from_element(6, 3, 0.4), vec![0; 6], vec![Split::Train; 6]).unwrap();
        for aggregation in [Aggregation::Sum, Aggregation::Max] {
            let cfg = DgcConfig { k: 2, hidden: 5, aggregation, ..Default::default() };
            let params = DgcParams::init(3, &cfg, 9).unwrap();
            let (p, _) = dgc_forward(&pop, &params, &cfg).unwrap();
            for r in 1..6 {
                assert_eq!(p.row(r), p.row(0));
            }
        }
    }
}
