use std::ops::Range;

use crate::error::{Error, Result};

/// Message-passing edge list grouped by destination node.
///
/// Entry `e` carries a message from `src[e]` into `dst[e]`; entries for
/// destination `i` occupy `offsets[i]..offsets[i + 1]`. Neighborhood
/// softmax and aggregation primitives rely on this grouping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeList {
    n_nodes: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    dst: Vec<usize>,
}

impl EdgeList {
    /// Builds from `(dst, src)` pairs. Order within a destination is
    /// preserved.
    pub fn from_pairs(n_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut counts = vec![0usize; n_nodes + 1];
        for &(d, s) in pairs {
            if d >= n_nodes || s >= n_nodes {
                return Err(Error::invalid(format!(
                    "edge ({d}, {s}) out of range for {n_nodes} nodes"
                )));
            }
            counts[d + 1] += 1;
        }
        for i in 0..n_nodes {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut src = vec![0; pairs.len()];
        let mut dst = vec![0; pairs.len()];
        for &(d, s) in pairs {
            let at = cursor[d];
            src[at] = s;
            dst[at] = d;
            cursor[d] += 1;
        }
        Ok(Self {
            n_nodes,
            offsets,
            src,
            dst,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    #[inline]
    pub fn segment(&self, node: usize) -> Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// Sub-list of entries with `keep[e] == true`, order preserved.
    pub fn filter(&self, keep: &[bool]) -> Result<EdgeList> {
        if keep.len() != self.len() {
            return Err(Error::invalid(format!(
                "edge mask has {} entries for {} edges",
                keep.len(),
                self.len()
            )));
        }
        let pairs: Vec<(usize, usize)> = (0..self.len())
            .filter(|&e| keep[e])
            .map(|e| (self.dst[e], self.src[e]))
            .collect();
        EdgeList::from_pairs(self.n_nodes, &pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_destination() {
        let e = EdgeList::from_pairs(3, &[(2, 0), (0, 1), (2, 1), (0, 0)]).unwrap();
        assert_eq!(e.offsets(), &[0, 2, 2, 4]);
        assert_eq!(e.src(), &[1, 0, 0, 1]);
        assert_eq!(e.dst(), &[0, 0, 2, 2]);
        assert_eq!(e.in_degree(1), 0);
    }

    #[test]
    fn filter_keeps_order() {
        let e = EdgeList::from_pairs(2, &[(0, 0), (0, 1), (1, 1), (1, 0)]).unwrap();
        let f = e.filter(&[true, false, true, true]).unwrap();
        assert_eq!(f.src(), &[0, 1, 0]);
        assert_eq!(f.offsets(), &[0, 1, 3]);
    }
}
