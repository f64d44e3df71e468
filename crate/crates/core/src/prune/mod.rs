//! Noise-driven gradual edge pruning for attention layers.

mod ops;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ops::{
    apply_gradual_prune, inject_noise, layer_rate, noisy_pair_covariance, pair_covariance, pruning_probability,
    pruning_threshold, recalibrate, PairCovariance, SignMode, TAU_FLOOR,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{apply_layer, gat_attention, LayerMask, Model, Topology, TrainHook};

/// How surviving edges enter the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Attention renormalized over survivors.
    Recalibrated,
    /// Renormalized attention with each node's row scaled by the share of
    /// its initial edge weight that survives.
    Decayed,
    /// Renormalized attention with each edge scaled by its own surviving
    /// share `w / w(init)`; self-loops keep full weight.
    #[default]
    EdgeDecayed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub noise_sigma: f64,
    pub noise_samples: usize,
    pub beta: f64,
    pub r0: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub sign_mode: SignMode,
    /// Epoch period of pruning steps.
    pub prune_every: usize,
    /// First epoch at which pruning may run.
    pub start_epoch: usize,
    pub aggregation: AggregationMode,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            noise_samples: 16,
            beta: 1.0,
            r0: 0.1,
            gamma: 0.1,
            epsilon: 1e-2,
            sign_mode: SignMode::AsWritten,
            prune_every: 10,
            start_epoch: 0,
            aggregation: AggregationMode::EdgeDecayed,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if self.noise_samples < 2 {
            return bad(format!("noise_samples must be at least 2, got {}", self.noise_samples));
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite".into());
        }
        if !(self.r0 >= 0.0 && self.r0.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("r0 and gamma must be non-negative, got {} and {}", self.r0, self.gamma));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if self.prune_every == 0 {
            return bad("prune_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Edge weights and prune flags of one layer, indexed by message edge.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPruneState {
    pub w: Vec<f64>,
    pub w_init: Vec<f64>,
    pub pruned: Vec<bool>,
    pub last_p: Vec<f64>,
    /// Recalibrated attention from the last step.
    pub alpha: Vec<f64>,
    is_self: Vec<bool>,
}

impl LayerPruneState {
    fn new(topo: &Topology, w: Vec<f64>) -> Self {
        let n = topo.n_edges();
        Self {
            w_init: w.clone(),
            w,
            pruned: vec![false; n],
            last_p: vec![0.0; n],
            alpha: vec![0.0; n],
            is_self: (0..n).map(|e| topo.is_self_loop(e)).collect(),
        }
    }

    /// Non-self-loop edges still alive.
    pub fn edges_alive(&self) -> usize {
        self.pruned.iter().zip(&self.is_self).filter(|(p, s)| !**p && !**s).count()
    }

    /// Surviving share `Σ_j w_ij / Σ_j w_ij(init)` of each node's weight.
    pub fn retained_mass(&self, topo: &Topology) -> Vec<f64> {
        let edges = topo.edges();
        (0..topo.n_nodes())
            .map(|i| {
                let seg = edges.segment(i);
                let now: f64 = seg.clone().map(|e| self.w[e]).sum();
                let init: f64 = seg.map(|e| self.w_init[e]).sum();
                if init > 0.0 {
                    now / init
                } else {
                    1.0
                }
            })
            .collect()
    }

    fn mask(&self, topo: &Topology, mode: AggregationMode) -> LayerMask {
        let alive = self.pruned.iter().map(|p| !p).collect();
        let scale = match mode {
            AggregationMode::Recalibrated => None,
            AggregationMode::Decayed => {
                let mass = self.retained_mass(topo);
                Some(topo.edges().dst().iter().map(|&i| mass[i]).collect())
            }
            AggregationMode::EdgeDecayed => Some(
                (0..self.w.len())
                    .map(|e| {
                        if self.is_self[e] || self.w_init[e] <= 0.0 {
                            1.0
                        } else {
                            self.w[e] / self.w_init[e]
                        }
                    })
                    .collect(),
            ),
        };
        LayerMask { alive, scale }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneLogRow {
    pub epoch: usize,
    pub layer: usize,
    pub edges_alive: usize,
    pub mean_p: f64,
    pub tau: f64,
    pub r: f64,
}

/// Pruning state of a whole model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PruneState {
    pub layers: Vec<LayerPruneState>,
    pub log: Vec<PruneLogRow>,
    masks: Vec<LayerMask>,
}

impl PruneState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_initialized(&self) -> bool {
        !self.layers.is_empty()
    }

    /// Forward masks per layer; empty before the first step.
    pub fn masks(&self) -> &[LayerMask] {
        &self.masks
    }

    /// Fraction of non-self-loop edges pruned, over all layers.
    pub fn pruned_fraction(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.is_self.iter().filter(|s| !**s).count()).sum();
        let alive: usize = self.layers.iter().map(|l| l.edges_alive()).sum();
        if total == 0 {
            0.0
        } else {
            1.0 - alive as f64 / total as f64
        }
    }
}

fn mix_seed(seed: u64, epoch: usize, layer: usize) -> u64 {
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((layer as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn head_average(alpha: &Tensor) -> Vec<f64> {
    let h = alpha.cols() as f64;
    (0..alpha.rows()).map(|e| alpha.row(e).iter().sum::<f64>() / h).collect()
}

/// Scatters per-survivor values back onto all message edges.
fn expand(values: &[f64], original: &[usize], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (v, &e) in values.iter().zip(original) {
        out[e] = *v;
    }
    out
}

/// One pruning pass over every layer, in order. Layer `t` sees the input
/// produced by the already-updated layers before it.
pub fn dynamo_step(
    model: &Model,
    topo: &Topology,
    x: &Tensor,
    state: &mut PruneState,
    cfg: &PruneConfig,
    epoch: usize,
) -> Result<()> {
    cfg.validate()?;
    if !model.kind().is_attention() {
        return Err(Error::invalid("edge pruning needs an attention model"));
    }
    let n_edges = topo.n_edges();
    let edges = topo.edges();
    if !state.is_initialized() {
        let mut h = x.clone();
        for t in 0..model.depth() {
            let (le, alpha) = gat_attention(model, topo, t, &h, None)?;
            state.layers.push(LayerPruneState::new(topo, expand(&head_average(&alpha), &le.original, n_edges)));
            h = apply_layer(model, topo, t, &h, None)?;
        }
        state.masks = state.layers.iter().map(|l| l.mask(topo, cfg.aggregation)).collect();
    }
    if state.layers.len() != model.depth() {
        return Err(Error::invalid("prune state does not match the model depth"));
    }

    let mut h = x.clone();
    for t in 0..model.depth() {
        let layer = &mut state.layers[t];
        let candidates: Vec<usize> = (0..n_edges).filter(|&e| !layer.is_self[e] && !layer.pruned[e]).collect();
        let r = layer_rate(cfg.r0, cfg.gamma, t);
        let mut row = PruneLogRow {
            epoch,
            layer: t,
            edges_alive: candidates.len(),
            mean_p: 0.0,
            tau: f64::NAN,
            r,
        };
        layer.last_p.iter_mut().for_each(|p| *p = 0.0);
        if !candidates.is_empty() {
            let weights: Vec<f64> = candidates.iter().map(|&e| layer.w[e]).collect();
            let tau = pruning_threshold(&weights, cfg.beta)?;
            let cov = noisy_pair_covariance(&h, cfg.noise_sigma, mix_seed(cfg.seed, epoch, t), cfg.noise_samples, edges)?;
            for &e in &candidates {
                layer.last_p[e] = pruning_probability(
                    layer.w[e],
                    cov.factor(edges, e, true),
                    cov.factor(edges, e, false),
                    tau,
                    r,
                    cfg.sign_mode,
                );
            }
            apply_gradual_prune(&mut layer.w, &mut layer.pruned, &layer.last_p, &layer.is_self, cfg.epsilon);
            row.tau = tau;
            row.mean_p = candidates.iter().map(|&e| layer.last_p[e]).sum::<f64>() / candidates.len() as f64;
            row.edges_alive = layer.edges_alive();
        }
        let mask = layer.mask(topo, cfg.aggregation);
        let (le, alpha) = gat_attention(
            model,
            topo,
            t,
            &h,
            Some(&LayerMask {
                alive: mask.alive.clone(),
                scale: None,
            }),
        )?;
        layer.alpha = expand(&head_average(&alpha), &le.original, n_edges);
        h = apply_layer(model, topo, t, &h, Some(&mask))?;
        state.masks[t] = mask;
        state.log.push(row);
    }
    Ok(())
}

/// Training hook running [`dynamo_step`] every `prune_every` epochs.
pub struct DynamoHook {
    pub config: PruneConfig,
    pub state: PruneState,
    best: Option<PruneState>,
}

impl DynamoHook {
    pub fn new(config: PruneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: PruneState::new(),
            best: None,
        })
    }
}

impl TrainHook for DynamoHook {
    fn before_epoch(&mut self, epoch: usize, model: &Model, topo: &Topology, features: &Tensor) -> Result<()> {
        if epoch >= self.config.start_epoch && epoch % self.config.prune_every == 0 {
            dynamo_step(model, topo, features, &mut self.state, &self.config, epoch)?;
        }
        Ok(())
    }

    fn masks(&self) -> Option<&[LayerMask]> {
        if self.state.is_initialized() {
            Some(self.state.masks())
        } else {
            None
        }
    }

    fn checkpoint(&mut self) {
        let mut snapshot = self.state.clone();
        snapshot.log.clear();
        self.best = Some(snapshot);
    }

    fn restore_best(&mut self) {
        if let Some(best) = self.best.take() {
            let log = std::mem::take(&mut self.state.log);
            self.state = best;
            self.state.log = log;
        }
    }
}

pub const PRUNE_LOG_HEADER: &str = "epoch,layer,edges_alive,mean_p,tau,r";

pub fn write_prune_log(path: &Path, rows: &[PruneLogRow]) -> Result<()> {
    let mut out = String::from(PRUNE_LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.11e},{:.11e},{:.11e}\n",
            r.epoch, r.layer, r.edges_alive, r.mean_p, r.tau, r.r
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
