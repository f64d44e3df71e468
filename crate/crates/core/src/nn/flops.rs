//! Exact forward-pass operation counts.
//!
//! Every scalar multiply, add, exponential, division and activation counts
//! as one operation. Bias additions and precomputed normalization
//! constants are not counted. A length-`k` dot product costs `2k - 1`.

use super::config::{ModelConfig, ModelKind};
use super::topology::{LayerMask, Topology};
use crate::graph::Graph;

/// Per-layer operation counts of one inference pass.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct FlopBreakdown {
    pub layers: Vec<u64>,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.layers.iter().sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 * 1e-9
    }
}

/// Counts with `nnz[l]` message edges (self-loops included) at layer `l`.
pub fn count_flops_with(cfg: &ModelConfig, n_nodes: usize, d_in: usize, n_classes: usize, nnz: &[usize]) -> FlopBreakdown {
    let n = n_nodes as u64;
    let attention = cfg.kind.is_attention();
    let layers = cfg
        .layer_shapes(d_in, n_classes)
        .iter()
        .zip(nnz)
        .map(|(s, &e)| {
            let (d_in, h, f) = (s.d_in as u64, s.heads as u64, s.head_dim as u64);
            let e = e as u64;
            let width = h * f;
            // Dense projection N × d_in times d_in × width.
            let mut c = n * width * (2 * d_in).saturating_sub(1);
            // Weighted neighbor sums, one per node and output column.
            c += width * (2 * e).saturating_sub(n);
            if attention {
                // Two scoring dot products per node and head.
                c += 2 * n * h * (2 * f).saturating_sub(1);
                // Logit sum and leaky rectifier per edge and head.
                c += 2 * e * h;
                // Neighborhood softmax: exponentials, segment sums, divisions.
                c += h * (3 * e).saturating_sub(n);
                if !s.concat {
                    c += n * f * h;
                }
            }
            if !s.last {
                c += n * s.d_out() as u64;
            }
            c
        })
        .collect();
    FlopBreakdown { layers }
}

/// Counts for `g`; pruned edges in `masks` are excluded for attention models.
pub fn count_flops(cfg: &ModelConfig, g: &Graph, masks: Option<&[LayerMask]>) -> FlopBreakdown {
    let topo_nnz = g.n_nodes() + 2 * g.n_edges();
    let nnz: Vec<usize> = (0..cfg.depth)
        .map(|l| match (cfg.kind, masks) {
            (ModelKind::Gcn, _) | (_, None) => topo_nnz,
            (_, Some(m)) => m[l].n_alive(),
        })
        .collect();
    count_flops_with(cfg, g.n_nodes(), g.feature_dim(), g.n_classes(), &nnz)
}

/// Same as [`count_flops`] given a prepared topology.
pub fn count_flops_topology(cfg: &ModelConfig, topo: &Topology, d_in: usize, n_classes: usize, masks: Option<&[LayerMask]>) -> FlopBreakdown {
    let nnz: Vec<usize> = (0..cfg.depth)
        .map(|l| match (cfg.kind, masks) {
            (ModelKind::Gcn, _) | (_, None) => topo.n_edges(),
            (_, Some(m)) => m[l].n_alive(),
        })
        .collect();
    count_flops_with(cfg, topo.n_nodes(), d_in, n_classes, &nnz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn one_node_linear_is_two() {
        let cfg = ModelConfig::new(ModelKind::Gcn, 1);
        let g = Graph::new(Tensor::zeros(1, 1), vec![0], 1, &[]).unwrap();
        assert_eq!(count_flops(&cfg, &g, None).total(), 2);
    }

    #[test]
    fn pruning_lowers_the_count() {
        let cfg = ModelConfig::new(ModelKind::DynamoGat, 2);
        let full = count_flops_with(&cfg, 10, 4, 3, &[40, 40]).total();
        let half = count_flops_with(&cfg, 10, 4, 3, &[25, 25]).total();
        assert!(half < full);
    }
}
