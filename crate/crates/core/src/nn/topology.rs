use std::rc::Rc;

use crate::autodiff::EdgeList;
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Per-edge survival mask and optional coefficient scale for one layer.
///
/// Indices refer to the message edges of a [`Topology`]. When `scale` is
/// present, each surviving attention coefficient is multiplied by it after
/// the neighborhood softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask {
    pub alive: Vec<bool>,
    pub scale: Option<Vec<f64>>,
}

impl LayerMask {
    pub fn all_alive(n_edges: usize) -> Self {
        Self {
            alive: vec![true; n_edges],
            scale: None,
        }
    }

    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }
}

/// Message edges restricted to a mask, ready for the tape primitives.
#[derive(Clone, Debug)]
pub struct LayerEdges {
    pub edges: Rc<EdgeList>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    /// Index of each entry in the unmasked topology.
    pub original: Vec<usize>,
}

impl LayerEdges {
    fn new(edges: EdgeList, original: Vec<usize>) -> Self {
        let src: Rc<[usize]> = edges.src().into();
        let dst: Rc<[usize]> = edges.dst().into();
        Self {
            edges: Rc::new(edges),
            src,
            dst,
            original,
        }
    }
}

/// Message-passing structure of a graph with a self-loop on every node.
///
/// Each destination segment lists the self-loop first, then the sorted
/// neighbors.
#[derive(Clone, Debug)]
pub struct Topology {
    n_nodes: usize,
    full: LayerEdges,
    is_self: Vec<bool>,
    gcn_coef: Vec<f64>,
    n_graph_edges: usize,
}

impl Topology {
    pub fn new(g: &Graph) -> Self {
        let n = g.n_nodes();
        let mut pairs = Vec::with_capacity(n + 2 * g.n_edges());
        for i in 0..n {
            pairs.push((i, i));
            for &j in g.neighbors(i) {
                pairs.push((i, j));
            }
        }
        let edges = EdgeList::from_pairs(n, &pairs).expect("graph edges are in range");
        let is_self = edges.src().iter().zip(edges.dst()).map(|(s, d)| s == d).collect();
        let gcn_coef = edges
            .src()
            .iter()
            .zip(edges.dst())
            .map(|(&s, &d)| 1.0 / (((g.degree(s) + 1) * (g.degree(d) + 1)) as f64).sqrt())
            .collect();
        let len = edges.len();
        Self {
            n_nodes: n,
            full: LayerEdges::new(edges, (0..len).collect()),
            is_self,
            gcn_coef,
            n_graph_edges: g.n_edges(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Message edges including self-loops.
    pub fn n_edges(&self) -> usize {
        self.full.edges.len()
    }

    pub fn n_graph_edges(&self) -> usize {
        self.n_graph_edges
    }

    pub fn edges(&self) -> &EdgeList {
        &self.full.edges
    }

    pub fn is_self_loop(&self, e: usize) -> bool {
        self.is_self[e]
    }

    /// Symmetric normalization `1/sqrt((d_i + 1)(d_j + 1))` per edge.
    pub fn gcn_coefficients(&self) -> &[f64] {
        &self.gcn_coef
    }

    pub fn full(&self) -> &LayerEdges {
        &self.full
    }

    /// Edges surviving `mask`; every node must keep at least one entry.
    pub fn masked(&self, mask: Option<&LayerMask>) -> Result<LayerEdges> {
        let Some(mask) = mask else {
            return Ok(self.full.clone());
        };
        if mask.alive.len() != self.n_edges() {
            return Err(Error::invalid(format!(
                "edge mask has {} entries for {} message edges",
                mask.alive.len(),
                self.n_edges()
            )));
        }
        let filtered = self.full.edges.filter(&mask.alive)?;
        for i in 0..self.n_nodes {
            if filtered.in_degree(i) == 0 {
                return Err(Error::invalid(format!("node {i} has no surviving neighbors, not even its self-loop")));
            }
        }
        let original = (0..self.n_edges()).filter(|&e| mask.alive[e]).collect();
        Ok(LayerEdges::new(filtered, original))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn self_loop_leads_each_segment() {
        let g = Graph::new(Tensor::zeros(3, 1), vec![0; 3], 1, &[(0, 1), (1, 2)]).unwrap();
        let t = Topology::new(&g);
        assert_eq!(t.n_edges(), 3 + 4);
        for i in 0..3 {
            let seg = t.edges().segment(i);
            assert_eq!(t.edges().src()[seg.start], i);
            assert!(t.is_self_loop(seg.start));
        }
        // Node 1 has degree 2, node 0 degree 1.
        let e01 = t.edges().segment(0).start + 1;
        assert!((t.gcn_coefficients()[e01] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn masking_out_a_self_loop_of_an_isolated_node_fails() {
        let g = Graph::new(Tensor::zeros(2, 1), vec![0; 2], 1, &[]).unwrap();
        let t = Topology::new(&g);
        let mask = LayerMask {
            alive: vec![true, false],
            scale: None,
        };
        assert!(t.masked(Some(&mask)).is_err());
    }
}
