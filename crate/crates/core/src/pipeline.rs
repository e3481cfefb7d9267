//! Stage orchestration and on-disk artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.json                 effective config
//! cohort/manifest.json        cohort snapshot (+ series/*.csv)
//! metrics.json                aggregated CGL+DGC metrics
//! knn_metrics.json            aggregated KNN baseline metrics
//! seed-N/config.json
//! seed-N/cgl_checkpoint.json  seed-N/cgl_history.csv
//! seed-N/attraction.csv       seed-N/attraction_hist.csv
//! seed-N/dgc_checkpoint.json  seed-N/dgc_history.csv
//! seed-N/predictions.csv      seed-N/metrics.json  seed-N/knn_metrics.json
//! seed-N/graphs/{raw,contrastive,hidden}.{dot,graphml}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::cgl::{
    encode, prepare_views, similarity_matrix, train_cgl, CglHistory, EncoderParams, PreparedView,
};
use crate::config::{DataSource, RunConfig};
use crate::dgc::{dgc_forward, patient_embedding, train_dgc, DgcHistory, DgcParams, PopulationGraph};
use crate::error::{Error, Result};
use crate::eval::{
    attraction_stats, auc, confusion_metrics, export_population_graph, knn_baseline, knn_features,
    AttractionStats, GraphFormat, MetricsReport, NodeInfo, RunMetrics,
};
use crate::fc::PcdScaler;
use crate::ingest::{load_cohort, save_cohort, split_cohort, synth_cohort, Cohort, Split};
use crate::tensor::{Matrix, ParamStore};

pub const CGL_CHECKPOINT: &str = "cgl_checkpoint.json";
pub const DGC_CHECKPOINT: &str = "dgc_checkpoint.json";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_data(cfg: &RunConfig) -> Result<Cohort> {
    match &cfg.data {
        DataSource::Manifest(path) => load_cohort(path),
        DataSource::Synth(spec) => synth_cohort(spec, cfg.synth_seed),
    }
}

/// Writes the effective config next to the artifacts of `dir`.
pub fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("config.json"), &(cfg.to_json()? + "\n"))
}

fn write_seed_config(cfg: &RunConfig, out: &Path, seed: u64) -> Result<PathBuf> {
    let dir = seed_dir(out, seed);
    let mut c = cfg.clone();
    c.seeds = vec![seed];
    c.output_dir = out.to_path_buf();
    write_config(&c, &dir)?;
    Ok(dir)
}

/// A cohort split for one seed with its prepared view graphs.
pub struct SeedData {
    pub seed: u64,
    pub cohort: Cohort,
    pub scaler: PcdScaler,
    pub views: Vec<Vec<PreparedView>>,
}

impl SeedData {
    pub fn new(cohort: &Cohort, cfg: &RunConfig, seed: u64) -> Result<Self> {
        let cohort = split_cohort(cohort, cfg.split_ratios, seed)?;
        let scaler = PcdScaler::fit(&cohort);
        let views = prepare_views(
            &cohort,
            cfg.n_views,
            cfg.min_window,
            &cfg.edge_policy,
            &scaler,
            cfg.encoder.lambda_max,
        )?;
        Ok(Self { seed, cohort, scaler, views })
    }

    pub fn labels(&self) -> Vec<u8> {
        self.cohort.labels()
    }

    pub fn splits(&self) -> Vec<Split> {
        self.cohort.patients().iter().map(|p| p.split).collect()
    }

    pub fn node_info(&self) -> Vec<NodeInfo> {
        self.cohort
            .patients()
            .iter()
            .map(|p| NodeInfo { id: p.id.clone(), label: p.label, split: p.split })
            .collect()
    }
}

/// Embeddings of every view of every patient.
pub fn embed_views(data: &SeedData, params: &EncoderParams, cfg: &RunConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    data.views
        .iter()
        .map(|vs| vs.iter().map(|v| encode(v, params, &cfg.encoder)).collect())
        .collect()
}

/// Attraction statistics over the first two views of the listed patients.
pub fn cohort_attraction(embeddings: &[Vec<Vec<f64>>], patients: &[usize]) -> Result<AttractionStats> {
    let d = embeddings
        .first()
        .and_then(|v| v.first())
        .map_or(0, Vec::len);
    let rows: Vec<&Vec<f64>> = patients.iter().flat_map(|&i| embeddings[i].iter().take(2)).collect();
    let e = Matrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Ok(attraction_stats(&similarity_matrix(&e)?))
}

pub fn population_graph(data: &SeedData, embeddings: &[Vec<Vec<f64>>]) -> Result<PopulationGraph> {
    let nodes = embeddings
        .iter()
        .zip(data.cohort.patients())
        .map(|(v, p)| {
            patient_embedding(v).map_err(|e| Error::Patient { patient: p.id.clone(), message: e.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = nodes.first().map_or(0, Vec::len);
    let features = Matrix::from_fn(nodes.len(), d, |i, j| nodes[i][j]);
    PopulationGraph::new(features, data.labels(), data.splits())
}

/// Test-split metrics from class-1 scores; predictions threshold at 0.5.
pub fn test_metrics(seed: u64, scores: &[f64], labels: &[u8], splits: &[Split]) -> Result<RunMetrics> {
    let test: Vec<usize> = (0..labels.len()).filter(|&i| splits[i] == Split::Test).collect();
    let s: Vec<f64> = test.iter().map(|&i| scores[i]).collect();
    let y: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
    let preds: Vec<u8> = s.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let c = confusion_metrics(&preds, &y, 1)?;
    Ok(RunMetrics { seed, auc: auc(&s, &y)?, acc: c.acc, sen: c.sen, spec: c.spec })
}

/// Raw-connectivity KNN baseline on the same split.
pub fn knn_metrics(data: &SeedData, k: usize) -> Result<RunMetrics> {
    let x = knn_features(&data.cohort, &data.scaler)?;
    let labels = data.labels();
    let splits = data.splits();
    let train = data.cohort.indices_in(Split::Train);
    let rows = |idx: &[usize]| Matrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)]);
    let train_y: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
    let all: Vec<usize> = (0..labels.len()).collect();
    let (scores, _) = knn_baseline(&rows(&train), &train_y, &rows(&all), k.min(train.len()))?;
    test_metrics(data.seed, &scores, &labels, &splits)
}

fn write_predictions(path: &Path, data: &SeedData, probs: &Matrix) -> Result<()> {
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["patient_id", "split", "label", "prob_class0", "prob_class1", "predicted"])
        .map_err(err)?;
    for (i, p) in data.cohort.patients().iter().enumerate() {
        w.write_record([
            p.id.clone(),
            p.split.as_str().to_string(),
            p.label.to_string(),
            probs[(i, 0)].to_string(),
            probs[(i, 1)].to_string(),
            u8::from(probs[(i, 1)] >= 0.5).to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_run_metrics(path: &Path, run: RunMetrics) -> Result<()> {
    MetricsReport::from_runs(vec![run])?.write_json(path)
}

/// Everything one seed produces.
pub struct SeedOutcome {
    pub dgc: RunMetrics,
    pub knn: RunMetrics,
    pub attraction: AttractionStats,
    pub cgl_history: CglHistory,
    pub dgc_history: DgcHistory,
    pub dgc_params: DgcParams,
}

struct CglArtifacts {
    history: CglHistory,
    embeddings: Vec<Vec<Vec<f64>>>,
    attraction: AttractionStats,
}

fn cgl_stage(data: &SeedData, cfg: &RunConfig, dir: &Path) -> Result<CglArtifacts> {
    let train = data.cohort.indices_in(Split::Train);
    let (params, history) = train_cgl(&data.views, &train, &cfg.encoder, &cfg.cgl, data.seed)?;
    params.store().save(&dir.join(CGL_CHECKPOINT))?;
    history.write_csv(&dir.join("cgl_history.csv"))?;
    let embeddings = embed_views(data, &params, cfg)?;
    // Summarised over the patients the encoder was trained on.
    let attraction = cohort_attraction(&embeddings, &train)?;
    attraction.write_csv(&dir.join("attraction.csv"), &dir.join("attraction_hist.csv"))?;
    Ok(CglArtifacts { history, embeddings, attraction })
}

struct DgcArtifacts {
    params: DgcParams,
    history: DgcHistory,
    pop: PopulationGraph,
    probs: Matrix,
    hidden: Matrix,
}

fn dgc_stage(data: &SeedData, embeddings: &[Vec<Vec<f64>>], cfg: &RunConfig, dir: &Path) -> Result<DgcArtifacts> {
    let pop = population_graph(data, embeddings)?;
    let (params, history) = train_dgc(&pop, &cfg.dgc, data.seed)?;
    params.store().save(&dir.join(DGC_CHECKPOINT))?;
    history.write_csv(&dir.join("dgc_history.csv"))?;
    let (probs, hidden) = dgc_forward(&pop, &params, &cfg.dgc)?;
    write_predictions(&dir.join("predictions.csv"), data, &probs)?;
    Ok(DgcArtifacts { params, history, pop, probs, hidden })
}

fn evaluate_stage(data: &SeedData, pop: &PopulationGraph, probs: &Matrix, cfg: &RunConfig, dir: &Path) -> Result<(RunMetrics, RunMetrics)> {
    let scores: Vec<f64> = (0..probs.nrows()).map(|i| probs[(i, 1)]).collect();
    let dgc = test_metrics(data.seed, &scores, &pop.labels, &pop.splits)?;
    let knn = knn_metrics(data, cfg.knn_k)?;
    write_run_metrics(&dir.join("metrics.json"), dgc)?;
    write_run_metrics(&dir.join("knn_metrics.json"), knn)?;
    Ok((dgc, knn))
}

fn export_stage(data: &SeedData, embeddings: &[Vec<Vec<f64>>], hidden: &Matrix, dir: &Path) -> Result<()> {
    let graphs = dir.join("graphs");
    create_dir(&graphs)?;
    let info = data.node_info();
    let raw = knn_features(&data.cohort, &data.scaler)?;
    let contrastive = population_graph(data, embeddings)?.features;
    for (name, features) in [("raw", &raw), ("contrastive", &contrastive), ("hidden", hidden)] {
        for format in [GraphFormat::Dot, GraphFormat::Graphml] {
            let path = graphs.join(format!("{name}.{}", format.extension()));
            export_population_graph(features, &info, &path, format)?;
        }
    }
    Ok(())
}

/// All stages for one seed, writing every per-seed artifact.
pub fn run_seed(cohort: &Cohort, cfg: &RunConfig, out: &Path, seed: u64) -> Result<SeedOutcome> {
    let dir = write_seed_config(cfg, out, seed)?;
    let data = SeedData::new(cohort, cfg, seed)?;
    let cgl = cgl_stage(&data, cfg, &dir)?;
    let dgc = dgc_stage(&data, &cgl.embeddings, cfg, &dir)?;
    let (dgc_metrics, knn) = evaluate_stage(&data, &dgc.pop, &dgc.probs, cfg, &dir)?;
    export_stage(&data, &cgl.embeddings, &dgc.hidden, &dir)?;
    Ok(SeedOutcome {
        dgc: dgc_metrics,
        knn,
        attraction: cgl.attraction,
        cgl_history: cgl.history,
        dgc_history: dgc.history,
        dgc_params: dgc.params,
    })
}

/// Aggregated results of a multi-seed run.
pub struct PipelineReport {
    pub dgc: MetricsReport,
    pub knn: MetricsReport,
    pub seeds: Vec<SeedOutcome>,
}

fn for_each_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || f(seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

fn write_aggregates(out: &Path, dgc: &[RunMetrics], knn: &[RunMetrics]) -> Result<(MetricsReport, MetricsReport)> {
    let dgc = MetricsReport::from_runs(dgc.to_vec())?;
    let knn = MetricsReport::from_runs(knn.to_vec())?;
    dgc.write_json(&out.join("metrics.json"))?;
    knn.write_json(&out.join("knn_metrics.json"))?;
    Ok((dgc, knn))
}

/// Snapshot, then every stage for each seed (seeds run in parallel), then
/// the aggregated metrics.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineReport> {
    cfg.validate()?;
    write_config(cfg, out)?;
    let cohort = load_data(cfg)?;
    save_cohort(&cohort, &out.join("cohort"))?;
    let seeds = for_each_seed(&cfg.seeds, |seed| run_seed(&cohort, cfg, out, seed))?;
    let dgc: Vec<RunMetrics> = seeds.iter().map(|s| s.dgc).collect();
    let knn: Vec<RunMetrics> = seeds.iter().map(|s| s.knn).collect();
    let (dgc, knn) = write_aggregates(out, &dgc, &knn)?;
    Ok(PipelineReport { dgc, knn, seeds })
}

/// Writes the cohort snapshot. For a manifest source this re-saves the
/// loaded data.
pub fn stage_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    write_config(cfg, out)?;
    save_cohort(&load_data(cfg)?, &out.join("cohort"))
}

/// Summary written by the ingest stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IngestSummary {
    pub patients: usize,
    pub rois: usize,
    pub views_per_patient: usize,
    pub feature_dim: usize,
    pub mean_edges_per_view: f64,
    pub class_counts: [usize; 2],
}

/// Loads the data, builds every view graph and writes the snapshot and a
/// summary.
pub fn stage_ingest(cfg: &RunConfig, out: &Path) -> Result<IngestSummary> {
    cfg.validate()?;
    write_config(cfg, out)?;
    let cohort = load_data(cfg)?;
    let data = SeedData::new(&cohort, cfg, cfg.seeds[0])?;
    let views: Vec<&PreparedView> = data.views.iter().flatten().collect();
    let labels = cohort.labels();
    let summary = IngestSummary {
        patients: cohort.len(),
        rois: cohort.roi_count(),
        views_per_patient: cfg.n_views,
        feature_dim: views.first().map_or(0, |v| v.features.ncols()),
        mean_edges_per_view: views.iter().map(|v| v.laplacian.topology.edges.len()).sum::<usize>() as f64
            / views.len() as f64,
        class_counts: [
            labels.iter().filter(|&&l| l == 0).count(),
            labels.iter().filter(|&&l| l == 1).count(),
        ],
    };
    save_cohort(&cohort, &out.join("cohort"))?;
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::invalid(e.to_string()))?;
    write_text(&out.join("ingest.json"), &(text + "\n"))?;
    Ok(summary)
}

pub fn stage_train_cgl(cfg: &RunConfig, out: &Path) -> Result<Vec<AttractionStats>> {
    cfg.validate()?;
    write_config(cfg, out)?;
    let cohort = load_data(cfg)?;
    for_each_seed(&cfg.seeds, |seed| {
        let dir = write_seed_config(cfg, out, seed)?;
        let data = SeedData::new(&cohort, cfg, seed)?;
        Ok(cgl_stage(&data, cfg, &dir)?.attraction)
    })
}

fn load_checkpoint(path: &Path, producer: &str) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("not found; run {producer} first"),
        });
    }
    ParamStore::load(path)
}

fn load_encoder(dir: &Path) -> Result<EncoderParams> {
    load_checkpoint(&dir.join(CGL_CHECKPOINT), "train-cgl").map(EncoderParams)
}

fn load_dgc(dir: &Path) -> Result<DgcParams> {
    load_checkpoint(&dir.join(DGC_CHECKPOINT), "train-dgc").map(DgcParams)
}

pub fn stage_train_dgc(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    for &seed in &cfg.seeds {
        load_checkpoint(&seed_dir(out, seed).join(CGL_CHECKPOINT), "train-cgl")?;
    }
    let cohort = load_data(cfg)?;
    for_each_seed(&cfg.seeds, |seed| {
        let dir = seed_dir(out, seed);
        let encoder = load_encoder(&dir)?;
        let data = SeedData::new(&cohort, cfg, seed)?;
        let embeddings = embed_views(&data, &encoder, cfg)?;
        dgc_stage(&data, &embeddings, cfg, &dir).map(|_| ())
    })?;
    Ok(())
}

struct Restored {
    data: SeedData,
    embeddings: Vec<Vec<Vec<f64>>>,
    pop: PopulationGraph,
    probs: Matrix,
    hidden: Matrix,
}

fn restore(cohort: &Cohort, cfg: &RunConfig, out: &Path, seed: u64) -> Result<Restored> {
    let dir = seed_dir(out, seed);
    let encoder = load_encoder(&dir)?;
    let dgc = load_dgc(&dir)?;
    let data = SeedData::new(cohort, cfg, seed)?;
    let embeddings = embed_views(&data, &encoder, cfg)?;
    let pop = population_graph(&data, &embeddings)?;
    let (probs, hidden) = dgc_forward(&pop, &dgc, &cfg.dgc)?;
    Ok(Restored { data, embeddings, pop, probs, hidden })
}

/// Recomputes predictions from saved checkpoints and writes per-seed and
/// aggregated metrics.
pub fn stage_evaluate(cfg: &RunConfig, out: &Path) -> Result<(MetricsReport, MetricsReport)> {
    cfg.validate()?;
    let cohort = load_data(cfg)?;
    let runs = for_each_seed(&cfg.seeds, |seed| {
        let r = restore(&cohort, cfg, out, seed)?;
        evaluate_stage(&r.data, &r.pop, &r.probs, cfg, &seed_dir(out, seed))
    })?;
    let (dgc, knn): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    write_aggregates(out, &dgc, &knn)
}

pub fn stage_export(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let cohort = load_data(cfg)?;
    for_each_seed(&cfg.seeds, |seed| {
        let r = restore(&cohort, cfg, out, seed)?;
        export_stage(&r.data, &r.embeddings, &r.hidden, &seed_dir(out, seed))
    })?;
    Ok(())
}
