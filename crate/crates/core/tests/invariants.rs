use ccgl_core::cgl::{
    contrastive_loss, encode, encode_on_tape, pair_loss, prepare_views, similarity_matrix, train_cgl, CglConfig,
    EncoderConfig, EncoderParams, LambdaMaxMode, PreparedView,
};
use ccgl_core::dgc::{edge_conv, focal_loss, knn_edges, Aggregation, DgcConfig, DgcParams, EdgeMlp};
use ccgl_core::eval::{auc, confusion_metrics, render_population_graph, GraphFormat, NodeInfo};
use ccgl_core::fc::{build_fc_graph, EdgePolicy, Edge, PcdScaler, ViewGraph};
use ccgl_core::ingest::synth_cohort;
use ccgl_core::pipeline::{stage_ingest, write_config};
use ccgl_core::tensor::{adam_step, forward_backward, Tape};
use ccgl_core::{Matrix, RoiTimeSeries, RunConfig, Split, SynthSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn view_graph(seed: u64, r: usize) -> ViewGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = gaussian(&mut rng, r, r) + Matrix::identity(r, r) * 2.0;
    let series = RoiTimeSeries::new(gaussian(&mut rng, 80, r) * mix).unwrap();
    let pcd: [f64; 7] = std::array::from_fn(|_| rng.sample(StandardNormal));
    build_fc_graph(&series, &pcd, &EdgePolicy { per_node_top: 3, shrinkage: 0.1 }).unwrap()
}

/// Moves node `i` to position `perm[i]`.
fn relabel(g: &ViewGraph, perm: &[usize]) -> ViewGraph {
    let mut features = g.node_features.clone();
    for (old, &new) in perm.iter().enumerate() {
        features.set_row(new, &g.node_features.row(old));
    }
    let edges = g
        .edges
        .iter()
        .map(|e| {
            let (a, b) = (perm[e.i], perm[e.j]);
            Edge { i: a.min(b), j: a.max(b), weight: e.weight }
        })
        .collect();
    ViewGraph { node_features: features, edges, roi_count: g.roi_count }
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig { hidden: [6, 6], embed_dim: 4, ..EncoderConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attraction_is_symmetric_with_unit_diagonal(seed in 0u64..10_000, pairs in 1usize..6, dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = gaussian(&mut rng, 2 * pairs, dim);
        let m = similarity_matrix(&e).unwrap();
        prop_assert_eq!(&m.values, &m.values.transpose());
        for i in 0..2 * pairs {
            prop_assert_eq!(m.values[(i, i)], 1.0);
            for j in 0..2 * pairs {
                if i != j {
                    prop_assert!(pair_loss(&m.values, i, j, 0.1) >= 0.0);
                }
            }
        }
        prop_assert!(contrastive_loss(&m, 0.5).unwrap() >= 0.0);
    }

    #[test]
    fn encode_ignores_node_order(seed in 0u64..10_000, perm_seed in 0u64..10_000) {
        let g = view_graph(seed, 8);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        // Full retention: relu zeros tie pooling scores, and ties break by index.
        let cfg = EncoderConfig { lambda_max: LambdaMaxMode::FixedTwo, pool_ratio: 1.0, ..small_encoder() };
        let params = EncoderParams::init(g.feature_dim(), &cfg, seed).unwrap();
        let a = encode(&PreparedView::new(&g, cfg.lambda_max).unwrap(), &params, &cfg).unwrap();
        let b = encode(&PreparedView::new(&relabel(&g, &perm), cfg.lambda_max).unwrap(), &params, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-10, "{:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn knn_out_degree_is_k(seed in 0u64..10_000, p in 2usize..30, dim in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..p);
        let edges = knn_edges(&gaussian(&mut rng, p, dim), k).unwrap();
        let mut deg = vec![0; p];
        edges.iter().for_each(|e| deg[e.0] += 1);
        prop_assert!(deg.iter().all(|&d| d == k));
    }

    #[test]
    fn edge_conv_is_permutation_equivariant(seed in 0u64..10_000, max in proptest::bool::ANY) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 9;
        let x = gaussian(&mut rng, p, 3);
        let edges = knn_edges(&x, 3).unwrap();
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut rng);
        let mut px = x.clone();
        for (old, &new) in perm.iter().enumerate() {
            px.set_row(new, &x.row(old));
        }
        let pedges: Vec<(usize, usize)> = edges.iter().map(|&(i, m)| (perm[i], perm[m])).collect();
        let agg = if max { Aggregation::Max } else { Aggregation::Sum };
        let (w1, w2) = (gaussian(&mut rng, 6, 4), gaussian(&mut rng, 4, 2));
        let run = |feat: &Matrix, e: &[(usize, usize)]| {
            let tape = Tape::new();
            let phi = EdgeMlp {
                w1: tape.constant(w1.clone()),
                b1: tape.constant(Matrix::from_element(1, 4, 0.1)),
                w2: tape.constant(w2.clone()),
                b2: tape.constant(Matrix::zeros(1, 2)),
            };
            let out = edge_conv(&tape, tape.constant(feat.clone()), e, &phi, agg).unwrap();
            tape.value(out)
        };
        let (a, b) = (run(&x, &edges), run(&px, &pedges));
        for (old, &new) in perm.iter().enumerate() {
            prop_assert!((a.row(old) - b.row(new)).amax() < 1e-12);
        }
    }

    #[test]
    fn focal_decreases_in_probability(a in 1e-9f64..1.0, b in 1e-9f64..1.0, gamma in 0.0f64..5.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(focal_loss(lo, gamma).unwrap() >= focal_loss(hi, gamma).unwrap());
        prop_assert!((focal_loss(a, 0.0).unwrap() + a.ln()).abs() <= 1e-12);
    }

    #[test]
    fn auc_rank_identities(seed in 0u64..10_000, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10u8))).collect();
        let base = auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() + 2.0 * s).collect();
        prop_assert_eq!(auc(&warped, &labels).unwrap(), base);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((base + auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_counts_cover_input(seed in 0u64..10_000, n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let c = confusion_metrics(&preds, &labels, 1).unwrap();
        prop_assert_eq!(c.tp + c.fp + c.tn + c.fn_, n);
    }

    #[test]
    fn export_has_two_out_edges(seed in 0u64..10_000, p in 3usize..30, dup in proptest::bool::ANY) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Duplicate rows stress tie handling.
        let features = if dup { Matrix::from_element(p, 2, 1.5) } else { gaussian(&mut rng, p, 3) };
        let nodes: Vec<NodeInfo> = (0..p)
            .map(|i| NodeInfo { id: format!("p{i}"), label: (i % 2) as u8, split: Split::Test })
            .collect();
        let dot = render_population_graph(&features, &nodes, GraphFormat::Dot).unwrap();
        for i in 0..p {
            let prefix = format!("  n{i} -> ");
            prop_assert_eq!(dot.lines().filter(|l| l.starts_with(&prefix)).count(), 2);
        }
    }
}

#[test]
fn forward_backward_is_deterministic() {
    let g = view_graph(5, 8);
    let cfg = small_encoder();
    let params = EncoderParams::init(g.feature_dim(), &cfg, 5).unwrap();
    let view = PreparedView::new(&g, cfg.lambda_max).unwrap();
    let run = || {
        forward_backward(params.store(), |tape, b| {
            let z = encode_on_tape(tape, b, &view, &cfg)?;
            Ok(tape.sum(tape.mul(z, tape.constant(Matrix::from_element(1, 4, 0.7)))?))
        })
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn adam_with_zero_gradients_keeps_values() {
    let params = DgcParams::init(3, &DgcConfig::default(), 1).unwrap();
    let mut store = params.0.clone();
    let zeros = store
        .names()
        .map(|n| (n.to_string(), Matrix::zeros(store.get(n).unwrap().nrows(), store.get(n).unwrap().ncols())))
        .collect();
    adam_step(&mut store, &zeros, 0.01).unwrap();
    for name in params.0.names() {
        assert_eq!(store.get(name).unwrap(), params.0.get(name).unwrap());
    }
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let spec = SynthSpec { patients: 12, rois: 8, timepoints: 120, ..SynthSpec::default() };
    let cohort = synth_cohort(&spec, 3).unwrap();
    let views = prepare_views(
        &cohort,
        2,
        30,
        &EdgePolicy::default(),
        &PcdScaler::fit(&cohort),
        LambdaMaxMode::Estimate,
    )
    .unwrap();
    let train: Vec<usize> = (0..12).collect();
    let cfg = CglConfig { lr: 0.0, epochs: 4, batch_size: 12, ..CglConfig::default() };
    let (_, history) = train_cgl(&views, &train, &small_encoder(), &cfg, 3).unwrap();
    let first = history.0[0].loss;
    // Batch order still changes, so only summation order may differ.
    assert!(history.0.iter().all(|e| (e.loss - first).abs() <= 1e-12 * first.abs()), "{history:?}");
}

#[test]
fn effective_config_is_written_and_revalidates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: RunConfig = RunConfig::from_json(r#"{"data": {"synth": {"patients": 12, "rois": 6}}, "seeds": [4]}"#).unwrap();
    write_config(&cfg, dir.path()).unwrap();
    let back = RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(back, cfg);
    stage_ingest(&cfg, dir.path()).unwrap();
    assert!(dir.path().join("ingest.json").exists());
}

#[test]
fn scatter_edges_reject_out_of_range() {
    let tape = Tape::new();
    let x = tape.constant(Matrix::zeros(2, 1));
    let phi = EdgeMlp {
        w1: tape.constant(Matrix::zeros(2, 1)),
        b1: tape.constant(Matrix::zeros(1, 1)),
        w2: tape.constant(Matrix::zeros(1, 1)),
        b2: tape.constant(Matrix::zeros(1, 1)),
    };
    assert!(edge_conv(&tape, x, &[(0, 1), (1, 2)], &phi, Aggregation::Sum).is_err());
}
