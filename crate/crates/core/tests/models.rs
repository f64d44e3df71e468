use dynamo_core::autodiff::{Activation, Tensor};
use dynamo_core::graph::{split_masks, Graph, SplitPolicy};
use dynamo_core::nn::{apply_layer, gat_attention, train, LayerMask, Model, ModelConfig, ModelKind, Topology, TrainConfig};
use dynamo_core::prune::recalibrate;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, d: usize, p: f64, rng: &mut ChaCha8Rng) -> Graph {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                pairs.push((i, j));
            }
        }
    }
    let x = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let labels = (0..n).map(|i| i % 3).collect();
    Graph::new(x, labels, 3, &pairs).unwrap()
}

fn dense(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn closed_neighborhood(g: &Graph, i: usize) -> Vec<usize> {
    std::iter::once(i).chain(g.neighbors(i).iter().copied()).collect()
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

#[test]
fn gcn_layer_matches_dense_normalized_adjacency() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_graph(9, 4, 0.35, &mut rng);
    let topo = Topology::new(&g);
    let mut cfg = ModelConfig::new(ModelKind::Gcn, 2);
    cfg.hidden_dim = 5;
    let model = Model::init(&cfg, 4, 3, 3).unwrap();
    let n = g.n_nodes();
    let a_hat = DMatrix::from_fn(n, n, |i, j| {
        if i == j || g.has_edge(i, j) {
            1.0 / (((g.degree(i) + 1) * (g.degree(j) + 1)) as f64).sqrt()
        } else {
            0.0
        }
    });
    let p = &model.layers[0];
    let bias = DMatrix::from_fn(n, 5, |_, c| p.bias.get(0, c));
    let want = (&a_hat * dense(g.features()) * dense(&p.w) + bias).map(|v| v.max(0.0));
    let got = dense(&apply_layer(&model, &topo, 0, g.features(), None).unwrap());
    assert!((want - got).amax() < 1e-12);
}

/// Explicit per-head attention: `e_ij = LeakyReLU(a_dst·h_i + a_src·h_j)`,
/// softmax over the closed neighborhood, heads concatenated.
#[test]
fn gat_layer_matches_explicit_attention_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_graph(8, 3, 0.4, &mut rng);
    let topo = Topology::new(&g);
    let mut cfg = ModelConfig::new(ModelKind::Gat, 2);
    cfg.hidden_dim = 6;
    cfg.heads = 3;
    let model = Model::init(&cfg, 3, 3, 4).unwrap();
    let p = &model.layers[0];
    let (heads, f) = (p.shape.heads, p.shape.head_dim);
    let h = g.features().matmul(&p.w).unwrap();
    let got = apply_layer(&model, &topo, 0, g.features(), None).unwrap();
    for i in 0..g.n_nodes() {
        let nb = closed_neighborhood(&g, i);
        for k in 0..heads {
            let dot = |node: usize, a: &Tensor| (0..f).map(|c| h.get(node, k * f + c) * a.get(k, c)).sum::<f64>();
            let logits: Vec<f64> = nb.iter().map(|&j| leaky(dot(i, &p.attn_dst) + dot(j, &p.attn_src), cfg.attention_slope)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..f {
                let agg: f64 = nb.iter().zip(&logits).map(|(&j, l)| (l - m).exp() / z * h.get(j, k * f + c)).sum();
                let want = elu(agg + p.bias.get(0, k * f + c));
                assert!((want - got.get(i, k * f + c)).abs() < 1e-12, "node {i} head {k} col {c}");
            }
        }
    }
}

#[test]
fn zero_attention_vectors_give_neighborhood_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_graph(10, 3, 0.3, &mut rng);
    let topo = Topology::new(&g);
    let mut cfg = ModelConfig::new(ModelKind::Gat, 1);
    cfg.hidden_dim = 4;
    cfg.heads = 2;
    let mut model = Model::init(&cfg, 3, 3, 5).unwrap();
    for l in &mut model.layers {
        l.attn_src = l.attn_src.map(|_| 0.0);
        l.attn_dst = l.attn_dst.map(|_| 0.0);
    }
    let (le, alpha) = gat_attention(&model, &topo, 0, g.features(), None).unwrap();
    for (e, &dst) in le.dst.iter().enumerate() {
        let want = 1.0 / (g.degree(dst) + 1) as f64;
        assert!((alpha.get(e, 0) - want).abs() < 1e-14);
    }
    let p = &model.layers[0];
    let h = g.features().matmul(&p.w).unwrap();
    let out = apply_layer(&model, &topo, 0, g.features(), None).unwrap();
    for i in 0..g.n_nodes() {
        let nb = closed_neighborhood(&g, i);
        for c in 0..out.cols() {
            let mean = nb.iter().map(|&j| h.get(j, c)).sum::<f64>() / nb.len() as f64;
            assert!((out.get(i, c) - mean - p.bias.get(0, c)).abs() < 1e-12);
        }
    }
}

fn random_mask(topo: &Topology, keep: f64, rng: &mut ChaCha8Rng) -> LayerMask {
    let alive = (0..topo.n_edges()).map(|e| topo.is_self_loop(e) || rng.random::<f64>() < keep).collect();
    LayerMask { alive, scale: None }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn layer_stacks_are_permutation_equivariant(seed in any::<u64>(), n in 3usize..12, kind in prop_oneof![Just(ModelKind::Gcn), Just(ModelKind::Gat)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, 3, 0.4, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let gp = g.permute(&perm).unwrap();
        let mut cfg = ModelConfig::new(kind, 3);
        cfg.hidden_dim = 4;
        cfg.heads = 2;
        let model = Model::init(&cfg, 3, 3, seed).unwrap();
        let out = model.predict(&Topology::new(&g), g.features(), None).unwrap();
        let outp = model.predict(&Topology::new(&gp), gp.features(), None).unwrap();
        for (a, b) in out.iter().zip(&outp) {
            for i in 0..n {
                for c in 0..a.cols() {
                    prop_assert!((a.get(i, c) - b.get(perm[i], c)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic_under_masks(seed in any::<u64>(), n in 2usize..12, keep in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, 3, 0.5, &mut rng);
        let topo = Topology::new(&g);
        let mut cfg = ModelConfig::new(ModelKind::Gat, 2);
        cfg.hidden_dim = 6;
        cfg.heads = 3;
        let model = Model::init(&cfg, 3, 3, seed).unwrap();
        for mask in [None, Some(random_mask(&topo, keep, &mut rng))] {
            let (le, alpha) = gat_attention(&model, &topo, 0, g.features(), mask.as_ref()).unwrap();
            if let Some(m) = &mask {
                prop_assert!(le.original.iter().all(|&e| m.alive[e]));
                prop_assert_eq!(le.original.len(), m.n_alive());
            }
            for i in 0..n {
                for k in 0..alpha.cols() {
                    let s: f64 = le.edges.segment(i).map(|e| alpha.get(e, k)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!(le.edges.segment(i).all(|e| alpha.get(e, k) > 0.0));
                }
            }
        }
    }

    /// Renormalizing the full softmax over survivors equals the softmax
    /// restricted to the survivors.
    #[test]
    fn recalibration_matches_masked_softmax(seed in any::<u64>(), n in 2usize..12, keep in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, 3, 0.5, &mut rng);
        let topo = Topology::new(&g);
        let mut cfg = ModelConfig::new(ModelKind::Gat, 2);
        cfg.hidden_dim = 4;
        cfg.heads = 2;
        let model = Model::init(&cfg, 3, 3, seed).unwrap();
        let mask = random_mask(&topo, keep, &mut rng);
        let pruned: Vec<bool> = mask.alive.iter().map(|a| !a).collect();
        let (_, full) = gat_attention(&model, &topo, 0, g.features(), None).unwrap();
        let (le, masked) = gat_attention(&model, &topo, 0, g.features(), Some(&mask)).unwrap();
        for k in 0..full.cols() {
            let col: Vec<f64> = (0..full.rows()).map(|e| full.get(e, k)).collect();
            let r = recalibrate(&col, topo.edges(), &pruned).unwrap();
            for (e, &orig) in le.original.iter().enumerate() {
                prop_assert!((r[orig] - masked.get(e, k)).abs() < 1e-12);
            }
            prop_assert!(pruned.iter().zip(&r).all(|(&p, &v)| !p || v == 0.0));
        }
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_graph(40, 5, 0.15, &mut rng);
    let masks = split_masks(&g, SplitPolicy::Fractional { train: 0.5, val: 0.25 }, 3).unwrap();
    for kind in [ModelKind::Gcn, ModelKind::Gat] {
        let mut cfg = ModelConfig::new(kind, 2);
        cfg.hidden_dim = 8;
        cfg.heads = 2;
        cfg.activation = Some(Activation::Elu);
        let tc = TrainConfig {
            epochs: 30,
            seed: 11,
            ..TrainConfig::default()
        };
        let (r1, m1) = train(&g, &masks, &cfg, &tc, None).unwrap();
        let (r2, m2) = train(&g, &masks, &cfg, &tc, None).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.layers, m2.layers);
        let (_, m3) = train(&g, &masks, &cfg, &TrainConfig { seed: 12, ..tc.clone() }, None).unwrap();
        assert_ne!(m1.layers, m3.layers);
    }
}
