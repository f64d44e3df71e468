use dynamo_core::autodiff::Tensor;
use dynamo_core::graph::{
    edge_homophily, generate_synthetic, load_planetoid, load_webkb, split_masks, write_planetoid, Graph, SplitPolicy,
    SyntheticSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(n: usize, k: usize, deg: f64, h: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_nodes: n,
        n_classes: k,
        target_avg_degree: deg,
        target_homophily: h,
        feature_dim: 8,
        class_feature_separation: 2.0,
        seed,
    }
}

fn is_symmetric(g: &Graph) -> bool {
    (0..g.n_nodes()).all(|i| g.neighbors(i).iter().all(|&j| j != i && g.neighbors(j).binary_search(&i).is_ok()))
}

/// Intra-class share of edges by counting every adjacency list entry.
fn counted_homophily(g: &Graph) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for i in 0..g.n_nodes() {
        for &j in g.neighbors(i) {
            total += 1;
            same += usize::from(g.labels()[i] == g.labels()[j]);
        }
    }
    same as f64 / total as f64
}

fn round_trip(g: &Graph) -> Graph {
    let dir = tempfile::tempdir().unwrap();
    let (c, e) = (dir.path().join("g.content"), dir.path().join("g.cites"));
    write_planetoid(g, &c, &e).unwrap();
    load_planetoid(&c, &e).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loader_round_trip_is_identity(seed in any::<u64>(), n in 3usize..30, p in 0.05f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = vec![(0, 1)];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    pairs.push((i, j));
                }
            }
        }
        let x = Tensor::from_fn(n, 4, |_, _| rng.random_range(-1e3..1e3) / 7.0);
        let g = Graph::new(x, (0..n).map(|i| i % 3).collect(), 3, &pairs).unwrap();
        let back = round_trip(&g);
        prop_assert!(is_symmetric(&back));
        prop_assert_eq!(back, g);
    }

    #[test]
    fn synthetic_homophily_lands_within_tolerance(seed in any::<u64>(), h in 0.0f64..=1.0, k in 2usize..6, deg in 4.0f64..20.0) {
        let g = generate_synthetic(&spec(600, k, deg, h, seed)).unwrap();
        prop_assert!(is_symmetric(&g));
        let measured = edge_homophily(&g).unwrap();
        prop_assert!((measured - counted_homophily(&g)).abs() < 1e-12);
        prop_assert!((measured - h).abs() <= 0.05, "target {h}, measured {measured}");
        prop_assert!((g.avg_degree() - deg).abs() <= 0.1 * deg);
    }
}

#[test]
fn synthetic_generation_is_pure_in_the_seed() {
    let s = spec(300, 4, 8.0, 0.4, 5);
    let g = generate_synthetic(&s).unwrap();
    assert_eq!(g, generate_synthetic(&s).unwrap());
    assert_ne!(g, generate_synthetic(&SyntheticSpec { seed: 6, ..s.clone() }).unwrap());
    assert_eq!(round_trip(&g), g);
}

#[test]
fn synthetic_reference_graph() {
    let g = generate_synthetic(&spec(1000, 5, 11.93, 0.6, 7)).unwrap();
    assert!((counted_homophily(&g) - 0.6).abs() <= 0.05);
    assert!((g.avg_degree() - 11.93).abs() <= 0.1 * 11.93);
    let sizes: Vec<usize> = (0..5).map(|c| g.labels().iter().filter(|&&y| y == c).count()).collect();
    assert_eq!(sizes, vec![200; 5]);
}

#[test]
fn extreme_homophily_is_exact() {
    let pure = generate_synthetic(&spec(200, 4, 10.0, 1.0, 1)).unwrap();
    assert_eq!(edge_homophily(&pure).unwrap(), 1.0);
    let mixed = generate_synthetic(&spec(200, 4, 10.0, 0.0, 1)).unwrap();
    assert_eq!(edge_homophily(&mixed).unwrap(), 0.0);
    assert!(generate_synthetic(&spec(20, 2, 25.0, 0.5, 1)).is_err());
}

#[test]
fn homophily_examples() {
    let x = Tensor::zeros(4, 1);
    let path = Graph::new(x.clone(), vec![0, 0, 1, 1], 2, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    assert!((edge_homophily(&path).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    let crossing = Graph::new(x.clone(), vec![0, 0, 1, 1], 2, &[(0, 2), (0, 3), (1, 3)]).unwrap();
    assert_eq!(edge_homophily(&crossing).unwrap(), 0.0);
    let same = Graph::new(x.clone(), vec![0; 4], 1, &[(0, 2), (1, 3)]).unwrap();
    assert_eq!(edge_homophily(&same).unwrap(), 1.0);
    assert!(edge_homophily(&Graph::new(x, vec![0; 4], 1, &[]).unwrap()).is_err());
}

#[test]
fn loader_drops_and_counts_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (c, e) = (dir.path().join("g.content"), dir.path().join("g.cites"));
    std::fs::write(&c, "p1\t1\t0\tA\np2\t0\t1\tB\np3\t1\t1\tA\n").unwrap();
    std::fs::write(&e, "p1\tp2\np2\tp1\np3\tp3\nzz\tp1\np2\tp3\n").unwrap();
    let (g, r) = load_planetoid(&c, &e).unwrap();
    assert_eq!((r.n_nodes, r.edge_rows, r.undirected_edges), (3, 5, 2));
    assert_eq!((r.dropped_unknown, r.dropped_self_loops, r.duplicate_pairs), (1, 1, 1));
    assert!(is_symmetric(&g));
    assert_eq!(g.class_names(), ["A", "B"]);

    std::fs::write(&e, "").unwrap();
    assert!(load_planetoid(&c, &e).is_err());
    let (g, _) = load_webkb(&c, &e).unwrap();
    assert_eq!(g.n_edges(), 0);
    assert!((0..3).all(|i| g.degree(i) == 0));
}

#[test]
fn split_sizes_and_determinism() {
    let g = generate_synthetic(&spec(183, 5, 3.0, 0.3, 2)).unwrap();
    let policy = SplitPolicy::Fractional { train: 0.6, val: 0.2 };
    let m = split_masks(&g, policy, 4).unwrap();
    assert_eq!(m.sizes(), (109, 36, 38));
    assert_eq!(m, split_masks(&g, policy, 4).unwrap());
    for i in 0..183 {
        assert_eq!(u8::from(m.train[i]) + u8::from(m.val[i]) + u8::from(m.test[i]), 1);
    }
    assert!(split_masks(&g, SplitPolicy::Fractional { train: 0.7, val: 0.4 }, 0).is_err());
    // 37 nodes per class is too few for 20 per class plus 1500 held out.
    assert!(split_masks(&g, SplitPolicy::PlanetoidStandard, 0).is_err());
}
