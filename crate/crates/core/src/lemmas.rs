//! Executable checks of the fixed-point, stability, pruning and rank
//! properties of attention layers.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Activation, Tensor};
use crate::dynamics::{
    feature_covariance, iterate_to_fixed_point, numerical_rank, oversmoothing_mu, spectral_radius,
    symmetric_eigenvalues, JacobianOperator, ModelLayerMap, SpectralOptions, DEFAULT_RANK_TOL,
};
use crate::error::{Error, Result};
use crate::graph::{split_masks, Graph, SplitPolicy};
use crate::nn::{apply_layer, train, LayerMask, LayerParams, LayerShape, Model, ModelConfig, ModelKind, Topology, TrainConfig};
use crate::prune::{dynamo_step, AggregationMode, PruneConfig, PruneState};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| scale * normal(rng))
}

/// Random orthogonal `d × d` matrix by Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Tensor::from_fn(d, d, |i, j| cols[j][i])
}

/// Largest singular value.
pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    let g = w.t_matmul(w)?;
    Ok(symmetric_eigenvalues(&g).first().copied().unwrap_or(0.0).max(0.0).sqrt())
}

/// Connected random graph: a random spanning tree plus uniformly drawn
/// extra edges up to `avg_degree`. Labels are balanced over `n_classes`
/// and features are class means plus unit noise.
pub fn random_connected_graph(
    n: usize,
    avg_degree: f64,
    feature_dim: usize,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Graph> {
    if n < 2 || n_classes == 0 {
        return Err(Error::invalid("random graph needs at least 2 nodes and 1 class"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pairs = Vec::new();
    for k in 1..n {
        pairs.push((order[k], order[rng.random_range(0..k)]));
    }
    let target = ((avg_degree * n as f64 / 2.0).round() as usize).min(n * (n - 1) / 2);
    let mut seen: std::collections::HashSet<(usize, usize)> =
        pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    while seen.len() < target {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && seen.insert((a.min(b), a.max(b))) {
            pairs.push((a, b));
        }
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    labels.shuffle(rng);
    let means = gaussian(n_classes, feature_dim, 1.0, rng);
    let features = Tensor::from_fn(n, feature_dim, |i, j| means.get(labels[i], j) + normal(rng));
    Graph::new(features, labels, n_classes, &pairs)
}

/// A single attention layer `d → d` with one head and the given weights.
fn square_gat_layer(w: Tensor, a_src: Tensor, a_dst: Tensor, bias: Tensor) -> LayerParams {
    let d = w.rows();
    LayerParams {
        shape: LayerShape {
            d_in: d,
            heads: a_src.rows(),
            head_dim: d / a_src.rows(),
            concat: true,
            last: false,
        },
        w,
        attn_src: a_src,
        attn_dst: a_dst,
        bias,
    }
}

/// Model applying `layer` `depth` times.
fn weight_tied(layer: LayerParams, depth: usize, activation: Activation) -> Model {
    let d = layer.shape.d_in;
    let mut config = ModelConfig::new(ModelKind::DynamoGat, depth);
    config.hidden_dim = d;
    config.heads = layer.shape.heads;
    config.activation = Some(activation);
    config.dropout = 0.0;
    Model {
        config,
        layers: vec![layer; depth],
    }
}

fn spectral_opts(seed: u64) -> SpectralOptions {
    SpectralOptions {
        max_iters: 3000,
        tol: 1e-9,
        seed,
        block: 4,
        window: 5,
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractionReport {
    /// Contraction bound `L·‖W‖₂·ρ(A_eff)` of the contractive layer.
    pub bound: f64,
    pub all_converged: bool,
    pub max_pairwise_distance: f64,
    pub mu: f64,
    pub rho: f64,
    pub expansive_rho: f64,
    pub expansive_converged: usize,
    /// Converged starts that ended back at the unstable origin.
    pub expansive_returned: usize,
}

impl ContractionReport {
    pub fn checks(&self) -> Vec<CheckOutcome> {
        vec![
            outcome(
                "fixed-point convergence",
                self.all_converged && self.max_pairwise_distance < 1e-6,
                format!(
                    "bound {:.3}, all starts converged: {}, max pairwise distance {:.3e}",
                    self.bound, self.all_converged, self.max_pairwise_distance
                ),
            ),
            outcome("oversmoothed attractor", self.mu < 1e-6, format!("mu(X*) = {:.3e}", self.mu)),
            outcome("stable fixed point", self.rho <= 1.0 + 1e-3, format!("rho(J) = {:.6}", self.rho)),
            outcome(
                "expansive layer",
                self.expansive_rho > 1.0 && self.expansive_converged == 0,
                format!(
                    "rho(J) = {:.4}, converged starts {}",
                    self.expansive_rho, self.expansive_converged
                ),
            ),
        ]
    }
}

/// Contractive and expansive single-layer constructions on a connected
/// random graph, iterated from `starts` random initial states.
pub fn contraction_battery(seed: u64, starts: usize) -> Result<ContractionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (30, 6);
    let g = random_connected_graph(n, 4.0, d, 2, &mut rng)?;
    let topo = Topology::new(&g);
    let act = Activation::Tanh;

    let w = gaussian(d, d, 1.0, &mut rng);
    // A row-stochastic attention matrix has spectral radius one.
    let bound_target = 0.9;
    let w = w.scale(bound_target / (act.lipschitz() * spectral_norm(&w)?));
    let bound = act.lipschitz() * spectral_norm(&w)?;
    let layer = square_gat_layer(
        w,
        gaussian(1, d, 0.5, &mut rng),
        gaussian(1, d, 0.5, &mut rng),
        gaussian(1, d, 0.5, &mut rng),
    );
    let model = weight_tied(layer, 1, act);
    let map = ModelLayerMap {
        model: &model,
        topo: &topo,
        layer: 0,
        mask: None,
    };
    let mut finals = Vec::with_capacity(starts);
    let mut all_converged = true;
    for _ in 0..starts {
        let x0 = gaussian(n, d, 3.0, &mut rng);
        let r = iterate_to_fixed_point(&map, &x0, 5000, 1e-12)?;
        all_converged &= r.converged;
        finals.push(r.x);
    }
    let mut max_pairwise_distance = 0.0f64;
    for a in 0..finals.len() {
        for b in a + 1..finals.len() {
            max_pairwise_distance = max_pairwise_distance.max(finals[a].sub(&finals[b])?.frobenius_norm());
        }
    }
    let x_star = finals[0].clone();
    let mu = oversmoothing_mu(&x_star);
    let rho = spectral_radius(&JacobianOperator { map: &map, at: x_star }, spectral_opts(seed))?.rho;

    let q = random_orthogonal(d, &mut rng).scale(3.0);
    let expansive = weight_tied(
        square_gat_layer(q, gaussian(1, d, 0.5, &mut rng), gaussian(1, d, 0.5, &mut rng), Tensor::zeros(1, d)),
        1,
        act,
    );
    let emap = ModelLayerMap {
        model: &expansive,
        topo: &topo,
        layer: 0,
        mask: None,
    };
    let origin = Tensor::zeros(n, d);
    let expansive_rho = spectral_radius(
        &JacobianOperator {
            map: &emap,
            at: origin.clone(),
        },
        spectral_opts(seed),
    )?
    .rho;
    let (mut expansive_converged, mut expansive_returned) = (0, 0);
    for _ in 0..starts {
        let x0 = origin.add(&gaussian(n, d, 1e-3, &mut rng))?;
        let r = iterate_to_fixed_point(&emap, &x0, 2000, 1e-12)?;
        if r.converged {
            expansive_converged += 1;
            if r.x.frobenius_norm() < 1e-6 {
                expansive_returned += 1;
            }
        }
    }
    Ok(ContractionReport {
        bound,
        all_converged,
        max_pairwise_distance,
        mu,
        rho,
        expansive_rho,
        expansive_converged,
        expansive_returned,
    })
}

/// Settings of the pruning-stability trials.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityTrialConfig {
    pub trials: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub avg_degree: f64,
    pub hidden: usize,
    pub heads: usize,
    pub epochs: usize,
    /// Required fraction of pruned edges before the comparison.
    pub prune_fraction: f64,
    pub max_prune_steps: usize,
    pub margin: f64,
    pub prune: PruneConfig,
}

impl Default for StabilityTrialConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            min_nodes: 20,
            max_nodes: 50,
            avg_degree: 4.0,
            hidden: 8,
            heads: 2,
            epochs: 100,
            prune_fraction: 0.05,
            max_prune_steps: 1000,
            margin: 1e-4,
            prune: PruneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityTrial {
    pub n_nodes: usize,
    /// The trained layer had to be rescaled to reach its fixed point.
    pub rescaled: bool,
    pub mu: f64,
    pub rho: f64,
    pub rho_pruned: f64,
    pub pruned_fraction: f64,
    pub prune_steps: usize,
    /// Nodes left with only their self-loop.
    pub isolated_nodes: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub trials: Vec<StabilityTrial>,
    pub margin: f64,
}

impl StabilityReport {
    pub fn pass_rate(&self) -> f64 {
        let n = self.trials.len().max(1) as f64;
        self.trials.iter().filter(|t| t.passed).count() as f64 / n
    }

    pub fn check(&self) -> CheckOutcome {
        let rate = self.pass_rate();
        outcome(
            "pruning lowers the Jacobian spectral radius",
            rate >= 0.95,
            format!(
                "{}/{} trials with rho_P < rho - {:e} ({:.1}%, need 95%)",
                self.trials.iter().filter(|t| t.passed).count(),
                self.trials.len(),
                self.margin,
                100.0 * rate
            ),
        )
    }
}

/// Trains a GAT on a random connected graph, finds the fixed point of its
/// hidden-to-hidden layer, prunes that layer at the fixed point and compares
/// Jacobian spectral radii before and after.
pub fn stability_trial(seed: u64, cfg: &StabilityTrialConfig) -> Result<StabilityTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
    let g = random_connected_graph(n, cfg.avg_degree, cfg.hidden, 3, &mut rng)?;
    let masks = split_masks(&g, SplitPolicy::default(), seed)?;
    let mut mcfg = ModelConfig::new(ModelKind::Gat, 3);
    mcfg.hidden_dim = cfg.hidden;
    mcfg.heads = cfg.heads;
    let tcfg = TrainConfig {
        lr: 0.01,
        epochs: cfg.epochs,
        patience: cfg.epochs,
        seed,
        ..TrainConfig::default()
    };
    let (_, trained) = train(&g, &masks, &mcfg, &tcfg, None)?;
    let topo = Topology::new(&g);
    let act = trained.config.activation();

    let mut layer = trained.layers[1].clone();
    let x_in = apply_layer(&trained, &topo, 0, g.features(), None)?;
    let mut model = weight_tied(layer.clone(), 1, act);
    let mut rescaled = false;
    let mut fp = {
        let map = ModelLayerMap {
            model: &model,
            topo: &topo,
            layer: 0,
            mask: None,
        };
        iterate_to_fixed_point(&map, &x_in, 5000, 1e-11)?
    };
    if !fp.converged {
        let bound = act.lipschitz() * spectral_norm(&layer.w)?;
        layer.w = layer.w.scale(0.9 / bound);
        model = weight_tied(layer, 1, act);
        rescaled = true;
        let map = ModelLayerMap {
            model: &model,
            topo: &topo,
            layer: 0,
            mask: None,
        };
        fp = iterate_to_fixed_point(&map, &x_in, 5000, 1e-11)?;
    }
    let x_star = fp.x;
    let map = ModelLayerMap {
        model: &model,
        topo: &topo,
        layer: 0,
        mask: None,
    };
    let rho = spectral_radius(&JacobianOperator { map: &map, at: x_star.clone() }, spectral_opts(seed))?.rho;

    let mut state = PruneState::new();
    let mut steps = 0;
    let prune_cfg = PruneConfig {
        seed,
        ..cfg.prune.clone()
    };
    while steps < cfg.max_prune_steps && (steps == 0 || state.pruned_fraction() < cfg.prune_fraction) {
        dynamo_step(&model, &topo, &x_star, &mut state, &prune_cfg, steps * prune_cfg.prune_every)?;
        steps += 1;
    }
    let mask: LayerMask = state.masks()[0].clone();
    let pmap = ModelLayerMap {
        model: &model,
        topo: &topo,
        layer: 0,
        mask: Some(&mask),
    };
    let rho_pruned = spectral_radius(&JacobianOperator { map: &pmap, at: x_star.clone() }, spectral_opts(seed))?.rho;
    let pruned_fraction = state.pruned_fraction();
    let mut has_neighbor = vec![false; n];
    for e in 0..topo.n_edges() {
        if mask.alive[e] && !topo.is_self_loop(e) {
            has_neighbor[topo.edges().dst()[e]] = true;
        }
    }
    let isolated_nodes = has_neighbor.iter().filter(|h| !**h).count();
    Ok(StabilityTrial {
        n_nodes: n,
        rescaled,
        mu: oversmoothing_mu(&x_star),
        rho,
        rho_pruned,
        pruned_fraction,
        prune_steps: steps,
        isolated_nodes,
        passed: fp.converged && pruned_fraction >= cfg.prune_fraction && rho_pruned < rho - cfg.margin,
    })
}

pub fn stability_battery(seed: u64, cfg: &StabilityTrialConfig) -> Result<StabilityReport> {
    let trials = (0..cfg.trials as u64)
        .map(|k| stability_trial(seed.wrapping_mul(1000).wrapping_add(k), cfg))
        .collect::<Result<_>>()?;
    Ok(StabilityReport {
        trials,
        margin: cfg.margin,
    })
}

/// Settings of the deep weight-tied rank experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RankConfig {
    /// Nodes per community; must be even.
    pub community_size: usize,
    pub communities: usize,
    pub intra_degree: usize,
    pub inter_degree: usize,
    pub dim: usize,
    pub depth: usize,
    pub weight_gain: f64,
    pub attention_scale: f64,
    pub activation: Activation,
    pub prune_steps: usize,
    pub prune: PruneConfig,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            community_size: 40,
            communities: 2,
            intra_degree: 10,
            inter_degree: 1,
            dim: 8,
            depth: 32,
            weight_gain: 1.0,
            attention_scale: 0.1,
            activation: Activation::Tanh,
            prune_steps: 40,
            prune: PruneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    pub dim: usize,
    /// Covariance rank per layer output, input first.
    pub rank_pruned: Vec<usize>,
    pub rank_unpruned: Vec<usize>,
    pub pruned_fraction: f64,
}

impl RankReport {
    pub fn check(&self) -> CheckOutcome {
        let kept = self.rank_pruned.iter().all(|&r| r == self.dim);
        let collapsed = self.rank_unpruned.last().is_some_and(|&r| r <= 2);
        outcome(
            "pruning preserves covariance rank",
            kept && collapsed,
            format!(
                "with pruning min rank {} (need {}), without pruning final rank {} (need <= 2), pruned {:.1}%",
                self.rank_pruned.iter().min().copied().unwrap_or(0),
                self.dim,
                self.rank_unpruned.last().copied().unwrap_or(0),
                100.0 * self.pruned_fraction
            ),
        )
    }
}

/// Planted partition in which every node has exactly `intra_degree`
/// neighbors inside its community and `inter_degree` in the next one, built
/// from random perfect matchings.
fn regular_partition(cfg: &RankConfig, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let s = cfg.community_size;
    if s < 2 || s % 2 == 1 || cfg.communities < 2 || cfg.intra_degree >= s {
        return Err(Error::invalid("regular partition needs an even community size above the degree"));
    }
    let n = s * cfg.communities;
    let mut seen = std::collections::HashSet::new();
    let add_matching = |pairs: Vec<(usize, usize)>, seen: &mut std::collections::HashSet<(usize, usize)>| {
        if pairs.iter().any(|&(a, b)| seen.contains(&(a.min(b), a.max(b)))) {
            return false;
        }
        seen.extend(pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))));
        true
    };
    for c in 0..cfg.communities {
        let mut rounds = 0;
        while rounds < cfg.intra_degree {
            let mut nodes: Vec<usize> = (c * s..(c + 1) * s).collect();
            nodes.shuffle(rng);
            if add_matching(nodes.chunks(2).map(|p| (p[0], p[1])).collect(), &mut seen) {
                rounds += 1;
            }
        }
    }
    // Pair block c with block c+1 for even c; an odd block count wraps.
    for c in (0..cfg.communities).step_by(2) {
        let next = (c + 1) % cfg.communities;
        let mut rounds = 0;
        while rounds < cfg.inter_degree {
            let mut perm: Vec<usize> = (0..s).collect();
            perm.shuffle(rng);
            if add_matching((0..s).map(|k| (c * s + k, next * s + perm[k])).collect(), &mut seen) {
                rounds += 1;
            }
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i / s).collect();
    let mut pairs: Vec<(usize, usize)> = seen.into_iter().collect();
    pairs.sort_unstable();
    let features = gaussian(n, cfg.dim, 1.0, rng);
    Graph::new(features, labels, cfg.communities, &pairs)
}

fn layer_ranks(model: &Model, topo: &Topology, x: &Tensor, masks: Option<&[LayerMask]>) -> Result<Vec<usize>> {
    let mut ranks = vec![numerical_rank(&feature_covariance(x)?, DEFAULT_RANK_TOL)];
    for out in model.predict(topo, x, masks)? {
        ranks.push(numerical_rank(&feature_covariance(&out)?, DEFAULT_RANK_TOL));
    }
    Ok(ranks)
}

/// A deep weight-tied attention stack with and without pruning; reports
/// the covariance rank after every layer.
pub fn rank_battery(seed: u64, cfg: &RankConfig) -> Result<RankReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = regular_partition(cfg, &mut rng)?;
    let topo = Topology::new(&g);
    let d = cfg.dim;
    let layer = square_gat_layer(
        random_orthogonal(d, &mut rng).scale(cfg.weight_gain),
        gaussian(1, d, cfg.attention_scale, &mut rng),
        gaussian(1, d, cfg.attention_scale, &mut rng),
        Tensor::zeros(1, d),
    );
    let model = weight_tied(layer, cfg.depth, cfg.activation);
    let x = g.features();
    let rank_unpruned = layer_ranks(&model, &topo, x, None)?;

    let prune_cfg = PruneConfig {
        seed,
        ..cfg.prune.clone()
    };
    let mut state = PruneState::new();
    for step in 0..cfg.prune_steps {
        dynamo_step(&model, &topo, x, &mut state, &prune_cfg, step * prune_cfg.prune_every)?;
    }
    let masks = if state.is_initialized() {
        Some(state.masks())
    } else {
        None
    };
    let rank_pruned = layer_ranks(&model, &topo, x, masks)?;
    Ok(RankReport {
        dim: d,
        rank_pruned,
        rank_unpruned,
        pruned_fraction: state.pruned_fraction(),
    })
}

/// Every battery with its default settings; deterministic in `seed`.
pub fn run_lemma_suite(seed: u64, aggregation: Option<AggregationMode>) -> Result<Vec<CheckOutcome>> {
    let mut checks = contraction_battery(seed, 10)?.checks();
    let mut stab = StabilityTrialConfig::default();
    let mut rank = RankConfig::default();
    if let Some(mode) = aggregation {
        stab.prune.aggregation = mode;
        rank.prune.aggregation = mode;
    }
    checks.push(stability_battery(seed, &stab)?.check());
    checks.push(rank_battery(seed, &rank)?.check());
    Ok(checks)
}
