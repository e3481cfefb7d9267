//! Contrastive graph learning: a spectral encoder for single-view FC graphs
//! trained so that two views of one patient attract and views of different
//! patients repel.

pub mod encoder;
pub mod laplacian;
pub mod loss;
pub mod train;

pub use encoder::{
    chebyshev_conv, chebyshev_conv_matrix, encode, encode_on_tape, select_top, topk_pool,
    EncoderConfig, EncoderParams, Pooled, PreparedView,
};
pub use laplacian::{
    largest_eigenvalue, normalized_laplacian, LambdaMaxMode, ScaledLaplacian, Topology,
    DEFAULT_EIGEN_TOL,
};
pub use loss::{contrastive_loss, contrastive_loss_on_tape, pair_loss, similarity_matrix, AttractionMatrix};
pub use train::{prepare_views, train_cgl, CglConfig, CglHistory, EpochStats};
