use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Parameters of a homophily-controlled random graph with Gaussian
/// class-cluster features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_nodes: usize,
    pub n_classes: usize,
    pub target_avg_degree: f64,
    pub target_homophily: f64,
    pub feature_dim: usize,
    pub class_feature_separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 || self.n_classes == 0 || self.n_classes > self.n_nodes {
            return Err(Error::invalid(format!(
                "synthetic graph needs n_nodes >= 2 and 1 <= n_classes <= n_nodes, got {} nodes, {} classes",
                self.n_nodes, self.n_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.target_homophily) {
            return Err(Error::invalid(format!(
                "homophily {} outside [0, 1]",
                self.target_homophily
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be at least 1"));
        }
        if !(self.class_feature_separation >= 0.0) {
            return Err(Error::invalid("class_feature_separation must be >= 0"));
        }
        if !(self.target_avg_degree >= 0.0) || self.target_avg_degree >= self.n_nodes as f64 {
            return Err(Error::Infeasible(format!(
                "average degree {} must lie in [0, n_nodes = {})",
                self.target_avg_degree, self.n_nodes
            )));
        }
        Ok(())
    }
}

const MAX_REDRAWS: usize = 10_000;

/// Draws a graph whose edges are intra-class with probability `h` each.
///
/// Classes are balanced and randomly placed. The edge count is
/// `round(n · degree / 2)`; each edge slot first draws intra/inter, then
/// draws endpoints uniformly under that pattern, redrawing duplicates.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Graph> {
    spec.validate()?;
    let (n, k) = (spec.n_nodes, spec.n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let outside: Vec<Vec<usize>> = (0..k)
        .map(|c| (0..n).filter(|&i| labels[i] != c).collect())
        .collect();

    let m = (n as f64 * spec.target_avg_degree / 2.0).round() as usize;
    let intra_cap: usize = members.iter().map(|v| v.len() * (v.len() - 1) / 2).sum();
    let inter_cap = n * (n - 1) / 2 - intra_cap;
    let h = spec.target_homophily;
    if (h == 1.0 && m > intra_cap) || (h == 0.0 && m > inter_cap) {
        return Err(Error::Infeasible(format!(
            "{m} edges requested but only {} are allowed at homophily {h}",
            if h == 1.0 { intra_cap } else { inter_cap }
        )));
    }

    let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(m);
    let mut pairs = Vec::with_capacity(m);
    for _ in 0..m {
        let intra = rng.random::<f64>() < h;
        let mut placed = false;
        for _ in 0..MAX_REDRAWS {
            let i = rng.random_range(0..n);
            let pool = if intra { &members[labels[i]] } else { &outside[labels[i]] };
            if pool.len() < if intra { 2 } else { 1 } {
                continue;
            }
            let j = pool[rng.random_range(0..pool.len())];
            if i == j || !seen.insert((i.min(j), i.max(j))) {
                continue;
            }
            pairs.push((i, j));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place a new {} edge after {MAX_REDRAWS} draws",
                if intra { "intra-class" } else { "inter-class" }
            )));
        }
    }

    let d = spec.feature_dim;
    let mut means = Tensor::zeros(k, d);
    for c in 0..k {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        for (o, x) in means.row_mut(c).iter_mut().zip(&v) {
            *o = spec.class_feature_separation * x / norm;
        }
    }
    let mut features = Tensor::zeros(n, d);
    for i in 0..n {
        let mu = means.row(labels[i]).to_vec();
        for (o, m) in features.row_mut(i).iter_mut().zip(mu) {
            *o = m + rng.sample::<f64, _>(StandardNormal);
        }
    }
    Graph::new(features, labels, k, &pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::edge_homophily;

    fn spec(h: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_nodes: 1000,
            n_classes: 5,
            target_avg_degree: 11.93,
            target_homophily: h,
            feature_dim: 8,
            class_feature_separation: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn extremes_are_exact() {
        assert_eq!(edge_homophily(&generate_synthetic(&spec(1.0)).unwrap()).unwrap(), 1.0);
        assert_eq!(edge_homophily(&generate_synthetic(&spec(0.0)).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn targets_are_met() {
        let g = generate_synthetic(&spec(0.6)).unwrap();
        // Direct count of intra-class edges and adjacency entries.
        let mut intra = 0usize;
        let mut entries = 0usize;
        for i in 0..g.n_nodes() {
            for &j in g.neighbors(i) {
                entries += 1;
                if j > i && g.labels()[i] == g.labels()[j] {
                    intra += 1;
                }
            }
        }
        let h = intra as f64 / (entries / 2) as f64;
        let deg = entries as f64 / g.n_nodes() as f64;
        assert!((h - 0.6).abs() <= 0.05, "homophily {h}");
        assert!((deg - 11.93).abs() <= 0.1 * 11.93, "degree {deg}");
    }

    #[test]
    fn balanced_classes() {
        let g = generate_synthetic(&spec(0.5)).unwrap();
        for c in 0..5 {
            assert_eq!(g.labels().iter().filter(|&&y| y == c).count(), 200);
        }
    }

    #[test]
    fn infeasible_degree() {
        let mut s = spec(0.5);
        s.target_avg_degree = 1000.0;
        assert!(matches!(generate_synthetic(&s), Err(Error::Infeasible(_))));
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(generate_synthetic(&spec(0.3)).unwrap(), generate_synthetic(&spec(0.3)).unwrap());
    }
}
