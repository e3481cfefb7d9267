//! Contrastive functional-connectivity graph learning with population-graph
//! classification.
//!
//! Per-patient ROI time series are cut into views, each view becomes a
//! functional-connectivity graph, a spectral encoder is trained
//! contrastively on those graphs, and a dynamic edge-convolution network
//! classifies patients on a KNN population graph built from the embeddings.

// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cgl;
pub mod config;
pub mod dgc;
pub mod error;
pub mod eval;
pub mod fc;
pub mod ingest;
pub mod pipeline;
pub mod tensor;

pub use config::{DataSource, RunConfig};
pub use error::{Error, Result};
pub use ingest::{Cohort, PatientRecord, RoiTimeSeries, Split, SynthSpec};
pub use tensor::Matrix;
