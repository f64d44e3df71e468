//! Undirected attributed graphs, splits, loaders and synthetic generators.

mod io;
mod split;
mod synthetic;

pub use io::{load_planetoid, load_webkb, write_planetoid, LoadReport};
pub use split::{split_masks, Masks, SplitPolicy};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Immutable undirected graph in compressed adjacency form.
///
/// Every undirected edge `{i, j}` appears in both adjacency lists. Lists are
/// sorted, contain no duplicates and no self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    class_names: Vec<String>,
    node_ids: Vec<String>,
}

impl Graph {
    /// Builds a graph from undirected `pairs`. Pairs are symmetrized;
    /// self-loops and repeated pairs are dropped.
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let n = features.rows();
        let names = (0..n_classes).map(|c| c.to_string()).collect();
        let ids = (0..n).map(|i| i.to_string()).collect();
        Self::with_names(features, labels, names, ids, pairs)
    }

    pub fn with_names(
        features: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        node_ids: Vec<String>,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let n = features.rows();
        let n_classes = class_names.len();
        if labels.len() != n || node_ids.len() != n {
            return Err(Error::invalid(format!(
                "{n} feature rows but {} labels and {} node ids",
                labels.len(),
                node_ids.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if n_classes == 0 && n > 0 {
            return Err(Error::invalid("graph with nodes needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {n_classes})")));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut list in adj {
            list.sort_unstable();
            list.dedup();
            neighbors.extend(list);
            offsets.push(neighbors.len());
        }
        Ok(Self {
            offsets,
            neighbors,
            features,
            labels,
            n_classes,
            class_names,
            node_ids,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn avg_degree(&self) -> f64 {
        if self.n_nodes() == 0 {
            return 0.0;
        }
        self.neighbors.len() as f64 / self.n_nodes() as f64
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Undirected edges as `(i, j)` with `i < j`, in adjacency order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes()).flat_map(move |i| self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    /// Same graph with node `i` moved to position `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.n_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permutation is not a bijection on the node set"));
        }
        let mut features = Tensor::zeros(n, self.feature_dim());
        let mut labels = vec![0; n];
        let mut ids = vec![String::new(); n];
        for i in 0..n {
            features.row_mut(perm[i]).copy_from_slice(self.features.row(i));
            labels[perm[i]] = self.labels[i];
            ids[perm[i]] = self.node_ids[i].clone();
        }
        let pairs: Vec<_> = self.edges().map(|(i, j)| (perm[i], perm[j])).collect();
        Graph::with_names(features, labels, self.class_names.clone(), ids, &pairs)
    }

    /// Copy with replaced node features.
    pub fn with_features(&self, features: Tensor) -> Result<Graph> {
        if features.rows() != self.n_nodes() || features.cols() == 0 {
            return Err(Error::ShapeMismatch {
                op: "with_features",
                left: self.features.shape(),
                right: features.shape(),
            });
        }
        Ok(Graph {
            features,
            ..self.clone()
        })
    }

    /// Keeps the undirected edges for which `keep(i, j)` is true.
    pub fn filter_edges(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Graph {
        let pairs: Vec<_> = self.edges().filter(|&(i, j)| keep(i, j)).collect();
        Graph::with_names(
            self.features.clone(),
            self.labels.clone(),
            self.class_names.clone(),
            self.node_ids.clone(),
            &pairs,
        )
        .expect("subgraph of a valid graph is valid")
    }
}

/// Fraction of undirected edges whose endpoints share a label.
pub fn edge_homophily(g: &Graph) -> Result<f64> {
    if g.n_edges() == 0 {
        return Err(Error::invalid("edge homophily is undefined on a graph without edges"));
    }
    let same = g.edges().filter(|&(i, j)| g.labels[i] == g.labels[j]).count();
    Ok(same as f64 / g.n_edges() as f64)
}
