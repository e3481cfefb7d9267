use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{encode_on_tape, EncoderConfig, EncoderParams, PreparedView};
use super::laplacian::LambdaMaxMode;
use super::loss::{contrastive_loss_on_tape, similarity_matrix};
use crate::error::{Error, Result};
use crate::fc::{build_fc_graph, EdgePolicy, PcdScaler};
use crate::ingest::{slice_views, Cohort};
use crate::tensor::{adam_step, forward_backward, Matrix};

/// Optimisation settings of the contrastive stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CglConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for CglConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            batch_size: 100,
            epochs: 150,
            lr: 0.001,
        }
    }
}

impl CglConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("cgl.tau", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("cgl.batch_size", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("cgl.lr", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub mean_homo: f64,
    pub mean_heter: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CglHistory(pub Vec<EpochStats>);

impl CglHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["epoch", "loss", "mean_homo", "mean_heter"])
            .map_err(|e| csv_error(path, e))?;
        for s in &self.0 {
            w.write_record([
                s.epoch.to_string(),
                s.loss.to_string(),
                s.mean_homo.to_string(),
                s.mean_heter.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// FC graphs of every view of every patient, PCD z-scored with `scaler`.
pub fn prepare_views(
    cohort: &Cohort,
    n_views: usize,
    min_window: usize,
    policy: &EdgePolicy,
    scaler: &PcdScaler,
    mode: LambdaMaxMode,
) -> Result<Vec<Vec<PreparedView>>> {
    cohort
        .patients()
        .iter()
        .map(|p| {
            let pcd = scaler.transform(&p.pcd);
            let wrap = |e: Error| Error::Patient {
                patient: p.id.clone(),
                message: e.to_string(),
            };
            slice_views(&p.series, n_views, min_window)
                .map_err(wrap)?
                .iter()
                .map(|v| {
                    let g = build_fc_graph(v, &pcd, policy).map_err(wrap)?;
                    PreparedView::new(&g, mode).map_err(wrap)
                })
                .collect()
        })
        .collect()
}

fn nan_mean(values: &[f64]) -> f64 {
    let kept: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

/// Trains the encoder on the patients listed in `train`. `views[i]` holds
/// the prepared views of patient `i`.
pub fn train_cgl(
    views: &[Vec<PreparedView>],
    train: &[usize],
    encoder: &EncoderConfig,
    cfg: &CglConfig,
    seed: u64,
) -> Result<(EncoderParams, CglHistory)> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid(format!(
            "contrastive training needs at least 2 training patients, got {}",
            train.len()
        )));
    }
    for &i in train {
        match views.get(i) {
            Some(v) if v.len() >= 2 => {}
            Some(v) => {
                return Err(Error::invalid(format!("patient {i} has {} views, need 2", v.len())));
            }
            None => return Err(Error::invalid(format!("patient index {i} out of range"))),
        }
    }
    let feature_dim = views[train[0]][0].features.ncols();
    let mut params = EncoderParams::init(feature_dim, encoder, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c91);
    let mut order = train.to_vec();
    let mut history = CglHistory::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut losses, mut homos, mut heters) = (Vec::new(), Vec::new(), Vec::new());
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let chosen: Vec<&PreparedView> = batch
                .iter()
                .flat_map(|&p| {
                    let vs = &views[p];
                    let pick = if vs.len() == 2 {
                        vec![0, 1]
                    } else {
                        sample(&mut rng, vs.len(), 2).into_vec()
                    };
                    pick.into_iter().map(move |v| &vs[v])
                })
                .collect();
            let mut embeddings = Matrix::zeros(0, 0);
            let (loss, grads) = forward_backward(params.store(), |tape, b| {
                let rows = chosen
                    .iter()
                    .map(|v| encode_on_tape(tape, b, v, encoder))
                    .collect::<Result<Vec<_>>>()?;
                let e = tape.concat_rows(&rows)?;
                embeddings = tape.value(e);
                contrastive_loss_on_tape(tape, e, cfg.tau)
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "contrastive loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            let (homo, heter) = similarity_matrix(&embeddings)?.mean_homo_heter();
            losses.push(loss);
            homos.push(homo);
            heters.push(heter);
            adam_step(&mut params.0, &grads, cfg.lr).map_err(|e| {
                Error::NonFinite(format!("epoch {epoch}, batch {batch_no}: {e}"))
            })?;
        }
        history.0.push(EpochStats {
            epoch,
            loss: nan_mean(&losses),
            mean_homo: nan_mean(&homos),
            mean_heter: nan_mean(&heters),
        });
    }
    Ok((params, history))
}
