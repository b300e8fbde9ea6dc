mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::{components, cosine, graph, random_graph, random_stack};
use muxgcl::analysis::{t_values, GaussianFit, Histogram, Triple};
use muxgcl::augment::{apply_mask, drop_edges, feature_mask, make_views, AugmentConfig, ViewAugment};
use muxgcl::dataset::{khop_egonet, load_dataset, normalize_adjacency, save_dataset};
use muxgcl::encoder::{forward, init_params, Activation, EncoderShape};
use muxgcl::eval::{accuracy, ari, kmeans, nmi};
use muxgcl::loss::{loss_and_gradients, pair_loss, total_loss, Objective};
use muxgcl::pae::{pool_patches, AffinityMode, AffinityTable, PatchTopoEmbeddings, TopoBackend};
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn edges_strategy(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2..max_n).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..3 * n)))
}

fn random_affinity(n: usize, l: usize, dim: usize, seed: u64, mode: AffinityMode) -> AffinityTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..=l)
        .map(|_| {
            let mut m = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0f32..1.0));
            for mut r in m.rows_mut() {
                let norm = r.dot(&r).sqrt();
                r /= norm;
            }
            m
        })
        .collect();
    let h = PatchTopoEmbeddings::from_layers(layers, TopoBackend::Node2vec, seed).unwrap();
    AffinityTable::materialize(Arc::new(h), mode, u64::MAX, muxgcl::pae::default_omega_min(n)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalized_adjacency_is_symmetric_with_unit_range((n, edges) in edges_strategy(30)) {
        let edges: Vec<_> = edges.into_iter().filter(|(a, b)| a != b).collect();
        let g = graph(n, &edges);
        let a = normalize_adjacency::<f64>(&g);
        let m = a.matrix();
        for (i, j, v) in m.iter() {
            prop_assert_eq!(m.get(j, i), Some(v));
            prop_assert!(v > 0.0 && v <= 1.0);
        }
        for i in 0..n {
            prop_assert!(m.get(i, i).is_some());
        }
    }

    #[test]
    fn egonets_grow_to_the_component((n, edges) in edges_strategy(25), anchor in 0usize..25) {
        let edges: Vec<_> = edges.into_iter().filter(|(a, b)| a != b).collect();
        let g = graph(n, &edges);
        let i = anchor % n;
        let mut prev: BTreeSet<usize> = BTreeSet::new();
        for k in 0..n {
            let cur: BTreeSet<usize> = khop_egonet(&g, i, k).into_iter().collect();
            prop_assert!(prev.is_subset(&cur));
            prop_assert!(cur.contains(&i));
            prev = cur;
        }
        let comp = components(n, &edges);
        let want: BTreeSet<usize> = (0..n).filter(|&j| comp[j] == comp[i]).collect();
        prop_assert_eq!(prev, want);
    }

    #[test]
    fn dropped_edges_are_a_subset(seed in any::<u64>(), p in 0.0f64..0.95) {
        let g = random_graph(20, 0.2, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dropped = drop_edges(g.adjacency(), p, &mut rng);
        for (a, b) in dropped.edges() {
            prop_assert!(g.adjacency().has_edge(a, b));
        }
        let cfg = AugmentConfig {
            view1: ViewAugment { edge_drop: p, feature_mask: p },
            view2: ViewAugment { edge_drop: p / 2.0, feature_mask: 0.1 },
        };
        let (v1, _) = make_views::<f64, _>(&g, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let clean = normalize_adjacency::<f64>(&g);
        for (i, j, _) in v1.adjacency.matrix().iter() {
            prop_assert!(i == j || clean.matrix().get(i, j).is_some());
        }
        let (w1, w2) = make_views::<f64, _>(&g, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let (x1, x2) = make_views::<f64, _>(&g, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(w1.features, x1.features);
        prop_assert_eq!(w2.adjacency.matrix().to_dense(), x2.adjacency.matrix().to_dense());
    }

    #[test]
    fn masking_commutes_with_row_selection(seed in any::<u64>(), p in 0.0f64..0.9, lo in 0usize..10, len in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((20, 7), |_| rng.random_range(-1.0f64..1.0));
        let keep = feature_mask(7, p, &mut rng);
        let rows = lo..(lo + len).min(20);
        let a = apply_mask(&x, &keep).slice(s![rows.clone(), ..]).to_owned();
        let b = apply_mask(&x.slice(s![rows, ..]).to_owned(), &keep);
        prop_assert_eq!(a, b);
        for (c, &k) in keep.iter().enumerate() {
            if !k {
                prop_assert!(apply_mask(&x, &keep).column(c).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        let g = random_graph(8, 0.3, 5, seed);
        let shape = EncoderShape { input_dim: 5, hidden: vec![4, 3], contrast_dim: 3, activation: Activation::Relu };
        let params = init_params::<f64>(&shape, seed);
        let before = params.clone();
        let view = muxgcl::GraphView::<f64>::clean(&g);
        let a = forward(&view, &params).unwrap();
        let b = forward(&view, &params).unwrap();
        prop_assert_eq!(&params, &before);
        prop_assert_eq!(a.embeddings.contrast, b.embeddings.contrast);
    }

    #[test]
    fn omega_within_bounds_and_pooling_unit_norm(seed in any::<u64>()) {
        let g = random_graph(30, 0.1, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Array2::from_shape_fn((30, 6), |_| rng.random_range(-1.0f32..1.0));
        let h = pool_patches(&base, &g, 2, TopoBackend::Node2vec, seed).unwrap();
        for k in 0..=2 {
            for r in h.layer(k).rows() {
                prop_assert!((r.dot(&r) - 1.0).abs() < 1e-5);
            }
        }
        let floor = muxgcl::pae::default_omega_min(30) as f32;
        let t = AffinityTable::materialize(Arc::new(h), AffinityMode::Precompute, u64::MAX, floor as f64).unwrap();
        for k in 0..=2 {
            for i in 0..30 {
                for j in (0..30).filter(|&j| j != i) {
                    let w = t.weight(i, j, k).unwrap();
                    prop_assert!(w >= floor && w <= 1.0);
                }
            }
        }
    }

    #[test]
    fn pair_loss_is_non_positive(seed in any::<u64>(), tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (zu, zv) = (random_stack(6, 2, 3, &mut rng), random_stack(6, 2, 3, &mut rng));
        let t = random_affinity(6, 2, 4, seed, AffinityMode::Precompute);
        let obj = Objective::new(tau, vec![0.2, 0.3, 0.5], &t).unwrap();
        for i in 0..6 {
            for k in 0..=2 {
                prop_assert!(pair_loss(&zu, &zv, i, k, &obj).unwrap() < 0.0);
            }
        }
    }

    #[test]
    fn loss_stays_finite_at_small_temperature(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (zu, zv) = (random_stack(7, 1, 4, &mut rng), random_stack(7, 1, 4, &mut rng));
        let t = AffinityTable::uniform(7, 1);
        let obj = Objective::new(0.01, vec![0.5, 0.5], &t).unwrap();
        let out = loss_and_gradients(&zu, &zv, &obj).unwrap();
        prop_assert!(out.value.is_finite());
        prop_assert!(out.grad_u.iter().chain(&out.grad_v).all(|g| g.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn partition_metrics_ignore_label_names(
        truth in prop::collection::vec(0usize..4, 2..40),
        perm_seed in any::<u64>(),
        pred_seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(pred_seed);
        let pred: Vec<usize> = truth.iter().map(|_| rng.random_range(0..3)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let mut perm: Vec<usize> = (0..10).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabel = |v: &[usize]| -> Vec<usize> { v.iter().map(|&x| perm[x] + 5).collect() };
        prop_assert!((nmi(&truth, &pred) - nmi(&relabel(&truth), &pred)).abs() < 1e-12);
        prop_assert!((nmi(&truth, &pred) - nmi(&truth, &relabel(&pred))).abs() < 1e-12);
        prop_assert!((ari(&truth, &pred) - ari(&relabel(&truth), &relabel(&pred))).abs() < 1e-12);
        prop_assert!(ari(&truth, &pred) <= 1.0 + 1e-12);
        let acc = accuracy(&pred, &truth);
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((40, 3), |_| rng.random_range(-1.0..1.0));
        let r = kmeans(&x, k, seed, 300).unwrap();
        for w in r.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn histogram_mass_is_one(samples in prop::collection::vec(-1.5f64..1.5, 1..300), bins in 1usize..60) {
        let h = Histogram::new(&samples, bins, -1.0, 1.0).unwrap();
        let width = 2.0 / bins as f64;
        let mass: f64 = h.density.iter().map(|d| d * width).sum();
        prop_assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_fit_is_the_sample_moments(samples in prop::collection::vec(-10.0f64..10.0, 1..200)) {
        let f = GaussianFit::from_samples(&samples).unwrap();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        prop_assert_eq!(f.mean, mean);
        prop_assert_eq!(f.std, var.sqrt());
    }

    #[test]
    fn t_statistics_match_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 9;
        let (zu, zv) = (random_stack(n, 2, 4, &mut rng), random_stack(n, 2, 4, &mut rng));
        let t = random_affinity(n, 2, 3, seed, AffinityMode::Lazy);
        let mut triples = Vec::new();
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                for k in 0..2 {
                    triples.push(Triple { i, j, k });
                }
            }
        }
        let got = t_values(&zu, &zv, &t, &triples).unwrap();
        let l = 2;
        for (idx, tr) in triples.iter().enumerate() {
            let (i, j, k) = (tr.i, tr.j, tr.k);
            let th = |a: &Array2<f64>, p: usize, b: &Array2<f64>, q: usize| cosine(a.row(p), b.row(q));
            let psi_s = |m: usize| th(&zu[l], i, &zu[m], j) - th(&zu[l], i, &zv[m], i);
            let psi_d = |m: usize| th(&zu[l], i, &zv[m], j) - th(&zu[l], i, &zv[m], i);
            let lw = (t.weight(i, j, k).unwrap() as f64).ln();
            prop_assert!((got.t_s[idx] - (psi_s(k) - psi_s(l) + lw)).abs() < 1e-7);
            prop_assert!((got.t_d[idx] - (psi_d(k) - psi_d(l) + lw)).abs() < 1e-7);
        }
    }
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let g = random_graph(15, 0.3, 4, 3);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&g, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.features(), g.features());
    assert_eq!(
        back.adjacency().edges().collect::<Vec<_>>(),
        g.adjacency().edges().collect::<Vec<_>>()
    );
    assert_eq!(back.labels(), g.labels());
}

#[test]
fn single_node_has_no_negatives() {
    let z = vec![ndarray::array![[1.0, 0.5]], ndarray::array![[0.3, 1.0]]];
    let t = AffinityTable::uniform(1, 1);
    let obj = Objective::new(0.5, vec![0.5, 0.5], &t).unwrap();
    assert_eq!(pair_loss(&z, &z, 0, 1, &obj).unwrap(), 0.0);
    assert_eq!(total_loss(&z, &z, &obj).unwrap(), 0.0);
}
