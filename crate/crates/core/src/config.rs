use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cgl::{CglConfig, EncoderConfig};
use crate::dgc::DgcConfig;
use crate::error::{Error, Result};
use crate::fc::EdgePolicy;
use crate::ingest::{SynthSpec, DEFAULT_MIN_WINDOW};

/// Where the cohort comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Manifest JSON; relative paths resolve against the config file.
    Manifest(PathBuf),
    Synth(SynthSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

/// Every tunable of a run. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSource,
    pub synth_seed: u64,
    pub n_views: usize,
    pub min_window: usize,
    pub edge_policy: EdgePolicy,
    pub encoder: EncoderConfig,
    pub cgl: CglConfig,
    pub dgc: DgcConfig,
    /// Train, validation and test fractions.
    pub split_ratios: [f64; 3],
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Neighbours used by the raw-connectivity baseline.
    pub knn_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            synth_seed: 7,
            n_views: 2,
            min_window: DEFAULT_MIN_WINDOW,
            edge_policy: EdgePolicy::default(),
            encoder: EncoderConfig::default(),
            cgl: CglConfig::default(),
            dgc: DgcConfig::default(),
            split_ratios: [0.7, 0.1, 0.2],
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs"),
            knn_k: 5,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            field: "<root>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves a manifest path against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let DataSource::Manifest(m) = &mut cfg.data {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synth(s) = &self.data {
            if s.patients < 4 {
                return Err(Error::config("data.synth.patients", "must be >= 4"));
            }
            if s.rois < 2 {
                return Err(Error::config("data.synth.rois", "must be >= 2"));
            }
            if s.sites == 0 {
                return Err(Error::config("data.synth.sites", "must be >= 1"));
            }
            if !(s.class_ratio > 0.0 && s.class_ratio < 1.0) {
                return Err(Error::config("data.synth.class_ratio", "must be in (0, 1)"));
            }
            if s.subtypes.contains(&0) {
                return Err(Error::config("data.synth.subtypes", "must be >= 1 per class"));
            }
            if !(s.noise >= 0.0 && s.noise.is_finite()) {
                return Err(Error::config("data.synth.noise", "must be >= 0"));
            }
            if !(0.0..=1.0).contains(&s.edge_density) {
                return Err(Error::config("data.synth.edge_density", "must be in [0, 1]"));
            }
            if !s.pcd_shift.is_finite() {
                return Err(Error::config("data.synth.pcd_shift", "must be finite"));
            }
            if !(0.0..=1.0).contains(&s.pcd_correlation) {
                return Err(Error::config("data.synth.pcd_correlation", "must be in [0, 1]"));
            }
            for (field, v) in [
                ("data.synth.class_effect", s.class_effect),
                ("data.synth.individual", s.individual),
                ("data.synth.site_effect", s.site_effect),
            ] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::config(field, "must be >= 0"));
                }
            }
            if s.timepoints / self.n_views.max(1) < self.min_window {
                return Err(Error::config(
                    "data.synth.timepoints",
                    format!(
                        "{} timepoints give views shorter than min_window {}",
                        s.timepoints, self.min_window
                    ),
                ));
            }
        }
        if self.n_views < 2 {
            return Err(Error::config("n_views", "must be >= 2"));
        }
        if self.min_window < 3 {
            return Err(Error::config("min_window", "must be >= 3"));
        }
        if self.edge_policy.per_node_top == 0 {
            return Err(Error::config("edge_policy.per_node_top", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.edge_policy.shrinkage) {
            return Err(Error::config("edge_policy.shrinkage", "must be in [0, 1]"));
        }
        self.encoder.validate()?;
        self.cgl.validate()?;
        self.dgc.validate()?;
        let r = self.split_ratios;
        if r.iter().any(|v| !(v >= &0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_ratios", "must be non-negative and sum to 1"));
        }
        if r[0] == 0.0 {
            return Err(Error::config("split_ratios", "train fraction must be > 0"));
        }
        if r[2] == 0.0 {
            return Err(Error::config("split_ratios", "test fraction must be > 0"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.knn_k == 0 {
            return Err(Error::config("knn_k", "must be >= 1"));
        }
        Ok(())
    }
}
