use std::rc::Rc;

use dynamo_core::autodiff::{gradient_check, Activation, EdgeList, Tape, Tensor};
use dynamo_core::dynamics::{eigenvalues, spectral_radius, SpectralOptions};
use dynamo_core::graph::Graph;
use dynamo_core::nn::{count_flops, ForwardOptions, Model, ModelConfig, ModelKind, Topology};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_edges(n: usize, rng: &mut ChaCha8Rng) -> Rc<EdgeList> {
    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random::<f64>() < 0.4 {
                pairs.push((i, j));
            }
        }
    }
    Rc::new(EdgeList::from_pairs(n, &pairs).unwrap())
}

/// Builds a scalar loss from one primitive applied to the inputs and a
/// fixed random projection of its output.
fn check_primitive<F>(inputs: Vec<Tensor>, seed: u64, build: F)
where
    F: Fn(&mut Tape, &[dynamo_core::autodiff::Var]) -> dynamo_core::autodiff::Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars);
        let (r, c) = t.value(out).shape();
        uniform(r, c, &mut rng)
    };
    let f = |point: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<_> = point.iter().map(|x| t.param(x.clone())).collect();
        let out = build(&mut t, &vars);
        let p = t.constant(probe.clone());
        let prod = t.mul(out, p)?;
        let loss = t.sum(prod);
        let value = t.value(loss).get(0, 0);
        let g = t.backward(loss)?;
        Ok((value, vars.iter().zip(point).map(|(&v, x)| g.get_or_zeros(v, x.shape())).collect()))
    };
    let r = gradient_check(f, &inputs, FD_STEP).unwrap();
    assert!(r.max_rel_err < GRAD_TOL, "max relative error {:.3e}", r.max_rel_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dense_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, row) = (uniform(4, 3, &mut rng), uniform(3, 5, &mut rng), uniform(1, 3, &mut rng));
        let c = uniform(4, 3, &mut rng);
        check_primitive(vec![a.clone(), b], seed, |t, v| t.matmul(v[0], v[1]).unwrap());
        check_primitive(vec![a.clone(), c.clone()], seed, |t, v| t.add(v[0], v[1]).unwrap());
        check_primitive(vec![a.clone(), c.clone()], seed, |t, v| t.mul(v[0], v[1]).unwrap());
        check_primitive(vec![a.clone(), row], seed, |t, v| t.add_row(v[0], v[1]).unwrap());
        check_primitive(vec![a.clone()], seed, |t, v| t.scale(v[0], -1.7));
        for act in [Activation::Tanh, Activation::Elu, Activation::LeakyRelu(0.2), Activation::Relu, Activation::Identity] {
            check_primitive(vec![a.clone()], seed, |t, v| t.activation(v[0], act));
        }
        let idx: Rc<[usize]> = Rc::from(vec![3, 0, 0, 2, 1]);
        check_primitive(vec![a.clone()], seed, |t, v| t.gather_rows(v[0], idx.clone()).unwrap());
        check_primitive(vec![a.clone()], seed, |t, v| t.scatter_add_rows(v[0], Rc::from(vec![1, 1, 0, 2]), 3).unwrap());
        let labels: Rc<[usize]> = Rc::from(vec![0, 2, 1, 2]);
        check_primitive(vec![a], seed, |t, v| {
            let l = t.cross_entropy(v[0], labels.clone(), Rc::from(vec![0, 1, 3])).unwrap();
            t.scale(l, 1.0)
        });
    }

    #[test]
    fn edge_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..6);
        let edges = random_edges(n, &mut rng);
        let (heads, f) = (2, 3);
        let scores = uniform(edges.len(), heads, &mut rng);
        let coef = uniform(edges.len(), heads, &mut rng);
        let h = uniform(n, heads * f, &mut rng);
        let a = uniform(heads, f, &mut rng);
        let e1 = edges.clone();
        check_primitive(vec![scores], seed, move |t, v| t.edge_softmax(v[0], e1.clone()).unwrap());
        let e2 = edges.clone();
        check_primitive(vec![coef, h.clone()], seed, move |t, v| t.edge_aggregate(v[0], v[1], e2.clone()).unwrap());
        check_primitive(vec![h.clone(), a], seed, |t, v| t.head_dot(v[0], v[1]).unwrap());
        check_primitive(vec![h], seed, |t, v| t.head_mean(v[0], heads).unwrap());
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, w) = (uniform(3, 4, &mut rng), uniform(4, 2, &mut rng));
        let grads = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(x.clone()), t.param(w.clone()));
            let y = t.matmul(xv, wv).unwrap();
            let y1 = t.activation(y, Activation::Tanh);
            let l1 = t.sum(y1);
            let y2 = t.mul(y, y).unwrap();
            let l2 = t.sum(y2);
            let s1 = t.scale(l1, ca);
            let s2 = t.scale(l2, cb);
            let l = t.add(s1, s2).unwrap();
            t.backward(l).unwrap().get(wv).unwrap().clone()
        };
        let combined = grads(a, b);
        let separate = grads(1.0, 0.0).scale(a).add(&grads(0.0, 1.0).scale(b)).unwrap();
        prop_assert!(combined.max_abs_diff(&separate).unwrap() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Power iteration against a dense eigensolve from an independent
    /// library.
    #[test]
    fn spectral_radius_matches_dense_eigensolve(seed in any::<u64>(), n in 1usize..=12, symmetric in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = uniform(n, n, &mut rng);
        if symmetric {
            m = m.add(&m.transpose()).unwrap();
        }
        let dense = DMatrix::from_row_slice(n, n, m.data());
        let truth = dense.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        let opts = SpectralOptions { max_iters: 20_000, tol: 1e-13, seed, block: n.min(6), window: 5 };
        let est = spectral_radius(&m, opts).unwrap();
        prop_assert!((est.rho - truth).abs() <= 1e-6 * truth.max(1e-12), "n={n} est {} truth {truth}", est.rho);
        let ours = eigenvalues(&m).iter().map(|z| z.abs()).fold(0.0, f64::max);
        prop_assert!((ours - truth).abs() <= 1e-8 * truth.max(1.0));
    }
}

/// Path 0 - 1 - 2 with two input features and two classes; every node
/// aggregates over itself and its path neighbors, 7 message edges.
fn three_node_path() -> Graph {
    Graph::new(Tensor::from_fn(3, 2, |i, j| (i + j) as f64), vec![0, 1, 0], 2, &[(0, 1), (1, 2)]).unwrap()
}

#[test]
fn flop_counter_matches_hand_audit_on_three_node_path() {
    let g = three_node_path();
    // GCN, 2 layers, hidden 4.
    // Layer 0: projection 3·4·(2·2−1) = 36; aggregation 4 columns × Σ_i(2·deg_i − 1) = 4·11 = 44;
    // activation 3·4 = 12. Total 92.
    // Layer 1: projection 3·2·(2·4−1) = 42; aggregation 2·11 = 22. Total 64.
    let mut gcn = ModelConfig::new(ModelKind::Gcn, 2);
    gcn.hidden_dim = 4;
    let c = count_flops(&gcn, &g, None);
    assert_eq!(c.layers, vec![92, 64]);
    assert_eq!(c.total(), 156);

    // GAT, 2 layers, hidden 4 as 2 heads of 2, one output head.
    // Layer 0: projection 36; aggregation 44; score dots 2 sides·3 nodes·2 heads·(2·2−1) = 36;
    // logit add + leaky rectifier 2·7·2 = 28; softmax per head 7 exp + (7−3) adds + 7 div = 18, ×2 = 36;
    // activation 12. Total 192.
    // Layer 1: projection 42; aggregation 22; score dots 2·3·1·(2·2−1) = 18; logits 2·7 = 14;
    // softmax 18; head average 3·2 = 6. Total 120.
    let mut gat = ModelConfig::new(ModelKind::Gat, 2);
    gat.hidden_dim = 4;
    gat.heads = 2;
    let c = count_flops(&gat, &g, None);
    assert_eq!(c.layers, vec![192, 120]);
    assert_eq!(c.total(), 312);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6;
    let pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 3), (1, 4)];
    let g = Graph::new(uniform(n, 3, &mut rng), vec![0, 1, 2, 0, 1, 2], 3, &pairs).unwrap();
    let topo = Topology::new(&g);
    for kind in [ModelKind::Gcn, ModelKind::Gat] {
        let mut cfg = ModelConfig::new(kind, 2);
        cfg.hidden_dim = 4;
        cfg.heads = 2;
        cfg.activation = Some(Activation::Tanh);
        let base = Model::init(&cfg, 3, 3, 9).unwrap();
        let point: Vec<Tensor> = base.parameters().into_iter().map(|t| t.map(|v| v + 0.1)).collect();
        let f = |params: &[Tensor]| {
            let mut m = base.clone();
            for (dst, src) in m.parameters_mut().into_iter().zip(params) {
                *dst = src.clone();
            }
            let mut t = Tape::new();
            let bound = m.bind(&mut t, true);
            let x = t.constant(g.features().clone());
            let out = m.forward(&mut t, &bound, &topo, x, ForwardOptions::default())?;
            let loss = t.cross_entropy(out.logits, Rc::from(g.labels().to_vec()), Rc::from((0..n).collect::<Vec<_>>()))?;
            let value = t.value(loss).get(0, 0);
            let grads = t.backward(loss)?;
            let vars = Model::flatten_bound(&bound);
            Ok((value, vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect()))
        };
        let r = gradient_check(f, &point, FD_STEP).unwrap();
        assert!(r.max_rel_err < GRAD_TOL, "{kind:?}: {:.3e}", r.max_rel_err);
    }
}
