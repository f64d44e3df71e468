use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{EdgeList, Tensor};
use crate::error::{Error, Result};

/// Which covariance combination each weight sign uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// Positive weights use `C_ii + C_jj − 2C_ij`, negative ones `+ 2C_ij`.
    #[default]
    AsWritten,
    /// The two combinations swapped.
    Flipped,
}

fn noise_rng(seed: u64, m: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    rng
}

/// `M` copies `X + σ·ξ^m` with i.i.d. standard normal `ξ^m`; copy `m`
/// depends only on `(seed, m)`.
pub fn inject_noise(x: &Tensor, sigma: f64, seed: u64, m: usize) -> Result<Vec<Tensor>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be positive, got {sigma}")));
    }
    Ok((0..m).map(|k| noisy_copy(x, sigma, seed, k)).collect())
}

fn noisy_copy(x: &Tensor, sigma: f64, seed: u64, m: usize) -> Tensor {
    let mut rng = noise_rng(seed, m);
    let mut out = x.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
    out
}

/// Scalar covariance per entry of `edges` plus the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCovariance {
    /// `C_ii` per node.
    pub diag: Vec<f64>,
    /// `C_ij` per edge entry, `i = dst`, `j = src`.
    pub edge: Vec<f64>,
}

impl PairCovariance {
    /// `C_ii + C_jj ∓ 2C_ij` for edge entry `e`.
    pub fn factor(&self, edges: &EdgeList, e: usize, minus: bool) -> f64 {
        let (i, j) = (edges.dst()[e], edges.src()[e]);
        let s = if minus { -2.0 } else { 2.0 };
        self.diag[i] + self.diag[j] + s * self.edge[e]
    }
}

/// Accumulates `Σ_m ⟨h_i^m − c_i, h_j^m − c_j⟩` relative to a shift `c`,
/// which leaves the unbiased estimator unchanged and avoids cancellation.
struct CovAccumulator {
    m: usize,
    n_feat: usize,
    sum: Tensor,
    diag: Vec<f64>,
    edge: Vec<f64>,
}

impl CovAccumulator {
    fn new(n: usize, d: usize, n_edges: usize) -> Self {
        Self {
            m: 0,
            n_feat: d,
            sum: Tensor::zeros(n, d),
            diag: vec![0.0; n],
            edge: vec![0.0; n_edges],
        }
    }

    fn add(&mut self, centered: &Tensor, edges: &EdgeList) {
        self.m += 1;
        for i in 0..centered.rows() {
            let r = centered.row(i);
            self.diag[i] += r.iter().map(|v| v * v).sum::<f64>();
            for (s, v) in self.sum.row_mut(i).iter_mut().zip(r) {
                *s += v;
            }
        }
        for (e, (&s, &d)) in edges.src().iter().zip(edges.dst()).enumerate() {
            self.edge[e] += crate::autodiff::dot(centered.row(d), centered.row(s));
        }
    }

    fn finish(self, edges: &EdgeList) -> PairCovariance {
        let m = self.m as f64;
        let scale = 1.0 / ((m - 1.0) * self.n_feat as f64);
        let dot_sum = |a: usize, b: usize| crate::autodiff::dot(self.sum.row(a), self.sum.row(b)) / m;
        let diag = (0..self.diag.len()).map(|i| (self.diag[i] - dot_sum(i, i)) * scale).collect();
        let edge = (0..self.edge.len())
            .map(|e| (self.edge[e] - dot_sum(edges.dst()[e], edges.src()[e])) * scale)
            .collect();
        PairCovariance { diag, edge }
    }
}

/// Unbiased pair covariance from explicit samples:
/// `C_ij = (1/d)·(1/(M−1))·Σ_m ⟨h_i^m − h̄_i, h_j^m − h̄_j⟩`.
pub fn pair_covariance(samples: &[Tensor], edges: &EdgeList) -> Result<PairCovariance> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "pair covariance needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let (n, d) = samples[0].shape();
    if n != edges.n_nodes() {
        return Err(Error::ShapeMismatch {
            op: "pair_covariance",
            left: (n, d),
            right: (edges.n_nodes(), d),
        });
    }
    let shift = &samples[0];
    let mut acc = CovAccumulator::new(n, d, edges.len());
    for s in samples {
        acc.add(&s.sub(shift)?, edges);
    }
    Ok(acc.finish(edges))
}

/// Same estimator as [`pair_covariance`] on the copies of
/// [`inject_noise`], without holding all copies in memory.
pub fn noisy_pair_covariance(x: &Tensor, sigma: f64, seed: u64, m: usize, edges: &EdgeList) -> Result<PairCovariance> {
    if m < 2 {
        return Err(Error::invalid(format!("pair covariance needs at least 2 samples, got {m}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be positive, got {sigma}")));
    }
    if x.rows() != edges.n_nodes() {
        return Err(Error::ShapeMismatch {
            op: "noisy_pair_covariance",
            left: x.shape(),
            right: (edges.n_nodes(), x.cols()),
        });
    }
    let mut acc = CovAccumulator::new(x.rows(), x.cols(), edges.len());
    let first = noisy_copy(x, sigma, seed, 0);
    for k in 0..m {
        let s = if k == 0 { first.clone() } else { noisy_copy(x, sigma, seed, k) };
        acc.add(&s.sub(&first)?, edges);
    }
    Ok(acc.finish(edges))
}

pub const TAU_FLOOR: f64 = 1e-12;

/// `mean(|w|) + β·std(|w|)` with the population standard deviation,
/// floored at [`TAU_FLOOR`].
pub fn pruning_threshold(weights: &[f64], beta: f64) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::invalid("pruning threshold needs at least one unpruned edge"));
    }
    let n = weights.len() as f64;
    let mean = weights.iter().map(|w| w.abs()).sum::<f64>() / n;
    let var = weights.iter().map(|w| (w.abs() - mean).powi(2)).sum::<f64>() / n;
    Ok((mean + beta * var.sqrt()).max(TAU_FLOOR))
}

/// `r0 · (1 + γ t)`.
pub fn layer_rate(r0: f64, gamma: f64, t: usize) -> f64 {
    r0 * (1.0 + gamma * t as f64)
}

/// Pruning probability of one edge, clamped to `[0, 1]`.
///
/// `factor_minus` is `C_ii + C_jj − 2C_ij` and `factor_plus` is
/// `C_ii + C_jj + 2C_ij`.
pub fn pruning_probability(w: f64, factor_minus: f64, factor_plus: f64, tau: f64, r: f64, mode: SignMode) -> f64 {
    if w == 0.0 {
        return 0.0;
    }
    let (pos, neg) = match mode {
        SignMode::AsWritten => (factor_minus, factor_plus),
        SignMode::Flipped => (factor_plus, factor_minus),
    };
    let factor = if w > 0.0 { pos } else { neg };
    let p = r * (w.abs() / tau) * factor;
    if p.is_nan() {
        return 0.0;
    }
    p.clamp(0.0, 1.0)
}

/// Multiplicative decay `w ← w·(1 − p)` with a hard prune below `ε`.
/// Entries flagged in `exempt` and entries already pruned are untouched.
pub fn apply_gradual_prune(w: &mut [f64], pruned: &mut [bool], p: &[f64], exempt: &[bool], epsilon: f64) {
    for e in 0..w.len() {
        if exempt[e] || pruned[e] {
            continue;
        }
        w[e] *= 1.0 - p[e];
        if w[e].abs() < epsilon {
            w[e] = 0.0;
            pruned[e] = true;
        }
    }
}

/// Renormalizes `alpha` over the surviving entries of each destination
/// segment; pruned entries become zero.
pub fn recalibrate(alpha: &[f64], edges: &EdgeList, pruned: &[bool]) -> Result<Vec<f64>> {
    if alpha.len() != edges.len() || pruned.len() != edges.len() {
        return Err(Error::invalid("recalibrate needs one coefficient and one flag per edge"));
    }
    let mut out = vec![0.0; alpha.len()];
    for i in 0..edges.n_nodes() {
        let seg = edges.segment(i);
        let mass: f64 = seg.clone().filter(|&e| !pruned[e]).map(|e| alpha[e]).sum();
        if !(mass > 0.0) {
            return Err(Error::invalid(format!("node {i} has no surviving attention mass")));
        }
        for e in seg {
            if !pruned[e] {
                out[e] = alpha[e] / mass;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        assert_eq!(pruning_threshold(&[0.3, 0.3, 0.3], 2.0).unwrap(), 0.3);
        assert!((pruning_threshold(&[0.5, 1.5], 1.0).unwrap() - 1.5).abs() < 1e-15);
        assert!((pruning_threshold(&[0.5, -1.5, 1.0], 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(pruning_threshold(&[], 1.0).is_err());
        assert_eq!(pruning_threshold(&[0.0], 1.0).unwrap(), TAU_FLOOR);
    }

    #[test]
    fn rate_examples() {
        assert_eq!(layer_rate(0.3, 0.0, 7), 0.3);
        assert!((layer_rate(0.1, 0.5, 2) - 0.2).abs() < 1e-15);
        assert_eq!(layer_rate(0.1, 0.5, 0), 0.1);
    }

    #[test]
    fn probability_examples() {
        assert_eq!(pruning_probability(0.7, 0.0, 4.0, 1.0, 0.5, SignMode::AsWritten), 0.0);
        assert_eq!(pruning_probability(0.0, 2.0, 2.0, 1.0, 0.5, SignMode::AsWritten), 0.0);
        assert!((pruning_probability(1.0, 2.0, 2.0, 1.0, 0.2, SignMode::AsWritten) - 0.4).abs() < 1e-15);
        assert_eq!(pruning_probability(0.7, 0.0, 4.0, 1.0, 0.5, SignMode::Flipped), 1.0);
        assert!((pruning_probability(-0.7, 0.0, 4.0, 1.0, 0.05, SignMode::AsWritten) - 0.14).abs() < 1e-15);
    }

    #[test]
    fn gradual_prune_examples() {
        let mut w = vec![0.5, 0.5, 0.02];
        let mut pruned = vec![false; 3];
        apply_gradual_prune(&mut w, &mut pruned, &[0.4, 1.0, 0.9], &[false, false, true], 0.01);
        assert!((w[0] - 0.3).abs() < 1e-15 && !pruned[0]);
        assert!(w[1] == 0.0 && pruned[1]);
        assert!(w[2] == 0.02 && !pruned[2]);
    }

    #[test]
    fn recalibrate_examples() {
        let edges = EdgeList::from_pairs(2, &[(0, 0), (0, 1), (0, 1), (1, 1)]).unwrap();
        let out = recalibrate(&[0.6, 0.2, 0.2, 1.0], &edges, &[false, false, true, false]).unwrap();
        assert!((out[0] - 0.75).abs() < 1e-15 && (out[1] - 0.25).abs() < 1e-15 && out[2] == 0.0);
        let out = recalibrate(&[0.4, 0.3, 0.3, 1.0], &edges, &[false, true, true, false]).unwrap();
        assert_eq!(out[0], 1.0);
        assert!(recalibrate(&[0.4, 0.3, 0.3, 1.0], &edges, &[true, true, true, false]).is_err());
    }

    #[test]
    fn covariance_of_duplicates_and_mirrors() {
        let edges = EdgeList::from_pairs(3, &[(0, 1), (0, 2)]).unwrap();
        let base = inject_noise(&Tensor::zeros(1, 4), 1.0, 5, 20).unwrap();
        let samples: Vec<Tensor> = base
            .iter()
            .map(|s| Tensor::from_rows(&[s.row(0).to_vec(), s.row(0).to_vec(), s.row(0).iter().map(|v| -v).collect()]).unwrap())
            .collect();
        let c = pair_covariance(&samples, &edges).unwrap();
        assert!(c.factor(&edges, 0, true).abs() < 1e-12);
        assert!(c.factor(&edges, 1, false).abs() < 1e-12);
        assert!(pair_covariance(&samples[..1], &edges).is_err());
    }

    #[test]
    fn streaming_matches_explicit_samples() {
        let edges = EdgeList::from_pairs(3, &[(0, 0), (0, 1), (1, 2), (2, 0)]).unwrap();
        let x = Tensor::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.3 - 2.0);
        let explicit = pair_covariance(&inject_noise(&x, 0.7, 11, 9).unwrap(), &edges).unwrap();
        let streamed = noisy_pair_covariance(&x, 0.7, 11, 9, &edges).unwrap();
        for (a, b) in explicit.edge.iter().zip(&streamed.edge).chain(explicit.diag.iter().zip(&streamed.diag)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
