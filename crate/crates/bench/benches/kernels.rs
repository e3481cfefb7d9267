use std::hint::black_box;

use ccgl_core::cgl::{
    chebyshev_conv_matrix, contrastive_loss_on_tape, encode, EncoderConfig, EncoderParams, PreparedView,
};
use ccgl_core::dgc::{dgc_forward, knn_edges, DgcConfig, DgcParams, PopulationGraph};
use ccgl_core::fc::{build_fc_graph, partial_corr_matrix, EdgePolicy};
use ccgl_core::tensor::{forward_backward, ParamStore};
use ccgl_core::{Matrix, RoiTimeSeries, Split};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

// Default cohort shape: 16 ROIs, 200 timepoints per view.
fn series(rng: &mut ChaCha8Rng) -> RoiTimeSeries {
    let mix = gaussian(rng, 16, 16) + Matrix::identity(16, 16) * 3.0;
    RoiTimeSeries::new(gaussian(rng, 200, 16) * mix).unwrap()
}

fn fc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = series(&mut rng);
    c.bench_function("partial_corr_16x200", |b| b.iter(|| partial_corr_matrix(black_box(&s), 0.1).unwrap()));
    c.bench_function("build_fc_graph_16", |b| {
        b.iter(|| build_fc_graph(black_box(&s), &[0.0; 7], &EdgePolicy::default()).unwrap())
    });
}

fn encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = EncoderConfig::default();
    let graph = build_fc_graph(&series(&mut rng), &[0.0; 7], &EdgePolicy::default()).unwrap();
    let view = PreparedView::new(&graph, cfg.lambda_max).unwrap();
    let params = EncoderParams::init(graph.feature_dim(), &cfg, 2).unwrap();
    let thetas: Vec<Matrix> = (0..cfg.cheb_k).map(|_| gaussian(&mut rng, graph.feature_dim(), 64)).collect();
    c.bench_function("chebyshev_conv_16", |b| {
        b.iter(|| chebyshev_conv_matrix(black_box(&view.features), &view.laplacian, &thetas).unwrap())
    });
    c.bench_function("encode_view", |b| b.iter(|| encode(black_box(&view), &params, &cfg).unwrap()));
}

fn contrastive(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::default();
    store.insert("e", gaussian(&mut rng, 200, 64)).unwrap();
    c.bench_function("contrastive_grad_batch100", |b| {
        b.iter(|| {
            forward_backward(black_box(&store), |tape, p| contrastive_loss_on_tape(tape, p.get("e")?, 0.1)).unwrap()
        })
    });
}

fn population(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let features = gaussian(&mut rng, 120, 64);
    c.bench_function("knn_edges_120x64_k20", |b| b.iter(|| knn_edges(black_box(&features), 20).unwrap()));
    let cfg = DgcConfig::default();
    let pop = PopulationGraph::new(features, (0..120).map(|i| (i % 2) as u8).collect(), vec![Split::Train; 120])
        .unwrap();
    let params = DgcParams::init(64, &cfg, 4).unwrap();
    c.bench_function("dgc_forward_120", |b| b.iter(|| dgc_forward(black_box(&pop), &params, &cfg).unwrap()));
}

criterion_group!(benches, fc, encoder, contrastive, population);
criterion_main!(benches);
