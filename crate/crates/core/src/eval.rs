//! Classification metrics, attraction statistics, population-graph export
//! and the raw-connectivity KNN baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cgl::loss::AttractionMatrix;
use crate::cgl::train::csv_error;
use crate::error::{Error, Result};
use crate::fc::{pearson_matrix, PcdScaler};
use crate::ingest::{Cohort, Split};
use crate::tensor::Matrix;

pub const HIST_BINS: usize = 50;

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Counts and rates for one run. A rate with a zero denominator is NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub acc: f64,
    pub sen: f64,
    pub spec: f64,
}

pub fn confusion_metrics(predictions: &[u8], labels: &[u8], positive: u8) -> Result<Confusion> {
    if predictions.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { f64::NAN } else { num as f64 / den as f64 };
    Ok(Confusion {
        tp,
        fp,
        tn,
        fn_,
        acc: rate(tp + tn, predictions.len()),
        sen: rate(tp, tp + fn_),
        spec: rate(tn, tn + fp),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub auc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spec: f64,
}

/// Per-seed metrics with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::invalid("no runs to summarise"));
        }
        let pick = |f: fn(&RunMetrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        let (auc, acc, sen, spec) = (
            pick(|r| r.auc),
            pick(|r| r.acc),
            pick(|r| r.sen),
            pick(|r| r.spec),
        );
        Ok(Self {
            mean: MetricSummary { auc: auc.0, acc: acc.0, sen: sen.0, spec: spec.0 },
            std: MetricSummary { auc: auc.1, acc: acc.1, sen: sen.1, spec: spec.1 },
            runs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Summary of one pair set.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Counts over 50 equal bins on [-1, 1]; 1 falls in the last bin.
    pub histogram: [usize; HIST_BINS],
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl PairSummary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let (mean, std) = if values.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = values.iter().sum::<f64>() / n;
            (m, (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
        };
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut histogram = [0; HIST_BINS];
        for v in &values {
            let bin = ((v + 1.0) / 2.0 * HIST_BINS as f64).floor();
            histogram[(bin.max(0.0) as usize).min(HIST_BINS - 1)] += 1;
        }
        Self {
            mean,
            std,
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            histogram,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttractionStats {
    pub homo: PairSummary,
    pub heter: PairSummary,
}

/// Splits the ordered off-diagonal entries into same-patient and
/// cross-patient pairs.
pub fn attraction_stats(m: &AttractionMatrix) -> AttractionStats {
    let n = m.values.nrows();
    let (mut homo, mut heter) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if m.pairing[i].0 == m.pairing[j].0 {
                homo.push(m.values[(i, j)]);
            } else {
                heter.push(m.values[(i, j)]);
            }
        }
    }
    AttractionStats {
        homo: PairSummary::new(homo),
        heter: PairSummary::new(heter),
    }
}

impl AttractionStats {
    /// `(pair_type, value)` rows and `(pair_type, bin_lo, bin_hi, count)` rows.
    pub fn write_csv(&self, values_path: &Path, hist_path: &Path) -> Result<()> {
        let sets = [("homo", &self.homo), ("heter", &self.heter)];
        let mut w = csv::Writer::from_path(values_path).map_err(|e| csv_error(values_path, e))?;
        w.write_record(["pair_type", "value"]).map_err(|e| csv_error(values_path, e))?;
        for (name, s) in sets {
            for v in &s.values {
                w.write_record([name, &v.to_string()]).map_err(|e| csv_error(values_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(values_path, e))?;

        let mut w = csv::Writer::from_path(hist_path).map_err(|e| csv_error(hist_path, e))?;
        w.write_record(["pair_type", "bin_lo", "bin_hi", "count"])
            .map_err(|e| csv_error(hist_path, e))?;
        let width = 2.0 / HIST_BINS as f64;
        for (name, s) in sets {
            for (b, count) in s.histogram.iter().enumerate() {
                let lo = -1.0 + b as f64 * width;
                w.write_record([
                    name.to_string(),
                    lo.to_string(),
                    (lo + width).to_string(),
                    count.to_string(),
                ])
                .map_err(|e| csv_error(hist_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(hist_path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Dot,
    Graphml,
}

impl GraphFormat {
    pub fn extension(self) -> &'static str {
        match self {
            GraphFormat::Dot => "dot",
            GraphFormat::Graphml => "graphml",
        }
    }
}

/// Node metadata for graph export.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInfo {
    pub id: String,
    pub label: u8,
    pub split: Split,
}

fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders a directed graph with two nearest-neighbour out-edges per node.
pub fn render_population_graph(features: &Matrix, nodes: &[NodeInfo], format: GraphFormat) -> Result<String> {
    let p = features.nrows();
    if p < 3 {
        return Err(Error::invalid(format!("graph export needs at least 3 nodes, got {p}")));
    }
    if nodes.len() != p {
        return Err(Error::invalid(format!("{} node records for {p} feature rows", nodes.len())));
    }
    let edges = crate::dgc::knn_edges(features, 2)?;
    let dist = |i: usize, j: usize| (features.row(i) - features.row(j)).norm();
    let mut out = String::new();
    match format {
        GraphFormat::Dot => {
            out.push_str("digraph population {\n");
            for (i, n) in nodes.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  n{i} [id=\"{}\", label=\"{}\", split=\"{}\"];",
                    escape_dot(&n.id),
                    n.label,
                    n.split.as_str()
                );
            }
            for &(i, j) in &edges {
                let _ = writeln!(out, "  n{i} -> n{j} [distance=\"{}\"];", dist(i, j));
            }
            out.push_str("}\n");
        }
        GraphFormat::Graphml => {
            out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
            out.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
            out.push_str("  <key id=\"id\" for=\"node\" attr.name=\"id\" attr.type=\"string\"/>\n");
            out.push_str("  <key id=\"label\" for=\"node\" attr.name=\"label\" attr.type=\"int\"/>\n");
            out.push_str("  <key id=\"split\" for=\"node\" attr.name=\"split\" attr.type=\"string\"/>\n");
            out.push_str("  <key id=\"distance\" for=\"edge\" attr.name=\"distance\" attr.type=\"double\"/>\n");
            out.push_str("  <graph id=\"population\" edgedefault=\"directed\">\n");
            for (i, n) in nodes.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "    <node id=\"n{i}\"><data key=\"id\">{}</data><data key=\"label\">{}</data><data key=\"split\">{}</data></node>",
                    escape_xml(&n.id),
                    n.label,
                    n.split.as_str()
                );
            }
            for (e, &(i, j)) in edges.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "    <edge id=\"e{e}\" source=\"n{i}\" target=\"n{j}\"><data key=\"distance\">{}</data></edge>",
                    dist(i, j)
                );
            }
            out.push_str("  </graph>\n</graphml>\n");
        }
    }
    Ok(out)
}

pub fn export_population_graph(
    features: &Matrix,
    nodes: &[NodeInfo],
    path: &Path,
    format: GraphFormat,
) -> Result<()> {
    let text = render_population_graph(features, nodes, format)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Upper-triangle Pearson values of the full series followed by the
/// z-scored PCD, one row per patient.
pub fn knn_features(cohort: &Cohort, scaler: &PcdScaler) -> Result<Matrix> {
    let rows = cohort
        .patients()
        .iter()
        .map(|p| {
            let mut row = pearson_matrix(&p.series)
                .map_err(|e| Error::Patient { patient: p.id.clone(), message: e.to_string() })?
                .upper_triangle();
            row.extend(scaler.transform(&p.pcd));
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Scores are the fraction of the `k` nearest training points labelled 1;
/// predictions take the majority with ties going to class 1.
pub fn knn_baseline(
    train_x: &Matrix,
    train_y: &[u8],
    test_x: &Matrix,
    k: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let n = train_x.nrows();
    if n == 0 {
        return Err(Error::invalid("KNN baseline has no training points"));
    }
    if train_y.len() != n {
        return Err(Error::invalid("training labels do not match training rows"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must be in [1, {n}]")));
    }
    if test_x.ncols() != train_x.ncols() {
        return Err(Error::Shape { op: "knn_baseline", lhs: train_x.shape(), rhs: test_x.shape() });
    }
    let mut scores = Vec::with_capacity(test_x.nrows());
    for t in test_x.row_iter() {
        let mut dist: Vec<(f64, usize)> = (0..n)
            .map(|i| ((train_x.row(i) - t).norm_squared(), i))
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let pos = dist.iter().take(k).filter(|(_, i)| train_y[*i] == 1).count();
        scores.push(pos as f64 / k as f64);
    }
    let preds = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
    Ok((scores, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgl::loss::similarity_matrix;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let c = confusion_metrics(&[1, 1, 0, 0], &[1, 0, 0, 1], 1).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 1, 1, 1));
        assert_eq!((c.acc, c.sen, c.spec), (0.5, 0.5, 0.5));
        let labels = [1, 0, 1, 1, 0];
        let c = confusion_metrics(&labels, &labels, 1).unwrap();
        assert_eq!((c.acc, c.sen, c.spec), (1.0, 1.0, 1.0));
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let c = confusion_metrics(&flipped, &labels, 1).unwrap();
        assert_eq!((c.acc, c.sen, c.spec), (0.0, 0.0, 0.0));
        assert!(confusion_metrics(&[], &[], 1).is_err());
    }

    #[test]
    fn report_statistics() {
        let run = |seed, auc| RunMetrics { seed, auc, acc: 0.5, sen: 0.5, spec: 0.5 };
        let r = MetricsReport::from_runs(vec![run(0, 0.8)]).unwrap();
        assert_eq!(r.std.auc, 0.0);
        let r = MetricsReport::from_runs(vec![run(0, 0.8), run(1, 0.9), run(2, 1.0)]).unwrap();
        assert!((r.mean.auc - 0.9).abs() < 1e-12);
        assert!((r.std.auc - 0.1).abs() < 1e-12);
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn attraction_single_patient() {
        let m = similarity_matrix(&Matrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0])).unwrap();
        let s = attraction_stats(&m);
        assert_eq!(s.homo.values.len(), 2);
        assert!(s.heter.values.is_empty());
        assert_eq!(s.homo.histogram.iter().sum::<usize>(), 2);
    }

    #[test]
    fn attraction_identical() {
        let m = similarity_matrix(&Matrix::from_element(6, 3, 0.5)).unwrap();
        let s = attraction_stats(&m);
        for set in [&s.homo, &s.heter] {
            assert!((set.mean - 1.0).abs() < 1e-12);
            assert!(set.std < 1e-12);
            assert_eq!(set.histogram[HIST_BINS - 1], set.values.len());
        }
        assert_eq!(s.homo.values.len(), 6);
        assert_eq!(s.heter.values.len(), 24);
    }

    #[test]
    fn quartiles_interpolate() {
        let s = PairSummary::new(vec![4.0, 1.0, 3.0, 2.0].into_iter().map(|v| v / 10.0).collect());
        assert!((s.q1 - 0.175).abs() < 1e-12);
        assert!((s.median - 0.25).abs() < 1e-12);
        assert!((s.q3 - 0.325).abs() < 1e-12);
    }

    #[test]
    fn knn_examples() {
        let train = Matrix::from_row_slice(4, 1, &[0.0, 0.1, 5.0, 5.1]);
        let y = [0, 0, 1, 1];
        let (s, p) = knn_baseline(&train, &y, &Matrix::from_row_slice(1, 1, &[5.0]), 1).unwrap();
        assert_eq!((s[0], p[0]), (1.0, 1));
        let (s, p) = knn_baseline(&train, &y, &Matrix::from_row_slice(2, 1, &[0.05, 4.0]), 3).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-15 && (s[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p, vec![0, 1]);
        let (s, p) = knn_baseline(&train, &y, &Matrix::from_row_slice(1, 1, &[2.5]), 4).unwrap();
        assert_eq!((s[0], p[0]), (0.5, 1));
        assert!(knn_baseline(&Matrix::zeros(0, 1), &[], &train, 1).is_err());
    }
}
