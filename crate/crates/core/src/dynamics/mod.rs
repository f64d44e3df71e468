//! Fixed points, Jacobian spectra, covariance rank and oversmoothing of
//! layer maps.

mod eigen;
mod spectral;

use std::fmt::Write as _;

pub use eigen::{eigenvalues, symmetric_eigenvalues, Complex};
pub use spectral::{spectral_radius, LinearOperator, SpectralEstimate, SpectralOptions};

use crate::autodiff::{EdgeList, Tensor};
use crate::error::{Error, Result};
use crate::nn::{gat_attention, LayerMask, Model, Topology};

/// Head-averaged attention of one layer as a sparse row-stochastic matrix.
#[derive(Clone, Debug)]
pub struct EffectiveAdjacency {
    pub edges: EdgeList,
    /// Coefficient of each entry of `edges`, row `dst`, column `src`.
    pub weights: Vec<f64>,
    /// Set when the model is a GCN and the matrix is the fixed
    /// normalized adjacency instead of attention.
    pub from_gcn: bool,
}

impl EffectiveAdjacency {
    pub fn n_nodes(&self) -> usize {
        self.edges.n_nodes()
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.n_nodes();
        let mut m = Tensor::zeros(n, n);
        for (e, (&s, &d)) in self.edges.src().iter().zip(self.edges.dst()).enumerate() {
            m.set(d, s, m.get(d, s) + self.weights[e]);
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_nodes())
            .map(|i| self.edges.segment(i).map(|e| self.weights[e]).sum())
            .collect()
    }

    /// `A · x` for a node-feature matrix `x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.n_nodes() {
            return Err(Error::ShapeMismatch {
                op: "effective adjacency apply",
                left: (self.n_nodes(), self.n_nodes()),
                right: x.shape(),
            });
        }
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for (e, (&s, &d)) in self.edges.src().iter().zip(self.edges.dst()).enumerate() {
            let w = self.weights[e];
            let src = x.row(s).to_vec();
            for (o, v) in out.row_mut(d).iter_mut().zip(src) {
                *o += w * v;
            }
        }
        Ok(out)
    }
}

/// Attention matrix of `layer` at input `x`, averaged over heads and
/// restricted to the edges alive in `mask`.
pub fn effective_adjacency(
    model: &Model,
    topo: &Topology,
    x: &Tensor,
    layer: usize,
    mask: Option<&LayerMask>,
) -> Result<EffectiveAdjacency> {
    if !model.kind().is_attention() {
        return Ok(EffectiveAdjacency {
            edges: topo.edges().clone(),
            weights: topo.gcn_coefficients().to_vec(),
            from_gcn: true,
        });
    }
    let (le, alpha) = gat_attention(model, topo, layer, x, mask)?;
    let heads = alpha.cols() as f64;
    let weights = (0..alpha.rows()).map(|e| alpha.row(e).iter().sum::<f64>() / heads).collect();
    Ok(EffectiveAdjacency {
        edges: (*le.edges).clone(),
        weights,
        from_gcn: false,
    })
}

/// A node-feature map `X ↦ f(X)` of fixed shape.
pub trait LayerMap {
    fn shape(&self) -> (usize, usize);
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

/// One layer of a model, optionally masked, as a map on its input.
pub struct ModelLayerMap<'a> {
    pub model: &'a Model,
    pub topo: &'a Topology,
    pub layer: usize,
    pub mask: Option<&'a LayerMask>,
}

impl LayerMap for ModelLayerMap<'_> {
    fn shape(&self) -> (usize, usize) {
        (self.topo.n_nodes(), self.model.layers[self.layer].shape.d_in)
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        crate::nn::apply_layer(self.model, self.topo, self.layer, x, self.mask)
    }
}

/// Any closure on tensors is a layer map of the given shape.
pub struct FnMap<F> {
    pub shape: (usize, usize),
    pub f: F,
}

impl<F: Fn(&Tensor) -> Result<Tensor>> LayerMap for FnMap<F> {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        (self.f)(x)
    }
}

/// `J_f(X) · v` by central differences with step
/// `1e-5 · (1 + ‖X‖_F) / ‖v‖_F`.
pub fn jacobian_vector_product(f: &dyn LayerMap, x: &Tensor, v: &Tensor) -> Result<Tensor> {
    x.expect_same_shape(v, "jacobian_vector_product")?;
    let nv = v.frobenius_norm();
    if nv == 0.0 || !nv.is_finite() {
        return Err(Error::invalid("jacobian_vector_product needs a nonzero finite direction"));
    }
    let h = 1e-5 * (1.0 + x.frobenius_norm()) / nv;
    let plus = f.apply(&x.add(&v.scale(h))?)?;
    let minus = f.apply(&x.sub(&v.scale(h))?)?;
    let jv = plus.sub(&minus)?.scale(0.5 / h);
    if !jv.is_finite() {
        return Err(Error::NonFinite("jacobian-vector product".into()));
    }
    Ok(jv)
}

/// The Jacobian of a layer map at a fixed state, as a flat linear operator.
pub struct JacobianOperator<'a> {
    pub map: &'a dyn LayerMap,
    pub at: Tensor,
}

impl LinearOperator for JacobianOperator<'_> {
    fn dim(&self) -> usize {
        self.at.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.iter().all(|&x| x == 0.0) {
            return Ok(vec![0.0; v.len()]);
        }
        let (r, c) = self.at.shape();
        let vt = Tensor::from_vec(r, c, v.to_vec())?;
        Ok(jacobian_vector_product(self.map, &self.at, &vt)?.into_data())
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointResult {
    pub x: Tensor,
    pub converged: bool,
    /// Set when a residual exceeded `1e12` or went non-finite.
    pub diverged: bool,
    pub steps: usize,
    /// `‖X(t+1) − X(t)‖_F` per step.
    pub residuals: Vec<f64>,
}

pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Iterates `f` from `x0` until successive iterates differ by less than
/// `tol` in Frobenius norm.
pub fn iterate_to_fixed_point(f: &dyn LayerMap, x0: &Tensor, max_iter: usize, tol: f64) -> Result<FixedPointResult> {
    if max_iter == 0 {
        return Err(Error::invalid("iterate_to_fixed_point needs max_iter >= 1"));
    }
    let mut x = x0.clone();
    let mut residuals = Vec::new();
    for step in 1..=max_iter {
        let next = f.apply(&x)?;
        let r = next.sub(&x)?.frobenius_norm();
        residuals.push(r);
        x = next;
        if !(r <= DIVERGENCE_LIMIT) {
            return Ok(FixedPointResult {
                x,
                converged: false,
                diverged: true,
                steps: step,
                residuals,
            });
        }
        if r < tol {
            return Ok(FixedPointResult {
                x,
                converged: true,
                diverged: false,
                steps: step,
                residuals,
            });
        }
    }
    Ok(FixedPointResult {
        x,
        converged: false,
        diverged: false,
        steps: max_iter,
        residuals,
    })
}

/// Centered second moment `(1/n) XᵀX − (1/n²) Xᵀ1 1ᵀX`.
pub fn feature_covariance(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::invalid(format!("feature covariance needs at least 2 rows, got {n}")));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    let mut c = Tensor::zeros(d, d);
    for i in 0..n {
        let row = x.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                let v = c.get(a, b) + da * (row[b] - mean[b]);
                c.set(a, b, v);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = c.get(a, b) / n as f64;
            c.set(a, b, v);
            c.set(b, a, v);
        }
    }
    Ok(c)
}

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Number of singular values of the symmetric matrix `c` above
/// `rank_tol · σ_max`.
pub fn numerical_rank(c: &Tensor, rank_tol: f64) -> usize {
    let sv: Vec<f64> = symmetric_eigenvalues(c).iter().map(|v| v.abs()).collect();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rank_tol * max).count()
}

/// Normalized distance from the row-constant subspace,
/// `‖X − (1/n) 1 1ᵀ X‖_F / max(‖X‖_F, 1e-30)`.
pub fn oversmoothing_mu(x: &Tensor) -> f64 {
    let (n, d) = x.shape();
    if n == 0 {
        return 0.0;
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    let mut dist = 0.0;
    for i in 0..n {
        for (v, m) in x.row(i).iter().zip(&mean) {
            dist += (v - m).powi(2);
        }
    }
    dist.sqrt() / x.frobenius_norm().max(1e-30)
}

/// Largest Euclidean distance between two rows.
pub fn pairwise_collapse(x: &Tensor) -> f64 {
    let n = x.rows();
    let mut best = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.max(d);
        }
    }
    best.sqrt()
}

/// Diagnostics of a model or layer map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DynamicsReport {
    pub spectral_radius: Option<SpectralEstimate>,
    pub residuals: Vec<f64>,
    pub covariance_rank: Vec<usize>,
    pub mu_trace: Vec<f64>,
    pub pairwise_collapse: f64,
}

impl DynamicsReport {
    /// Flat CSV: one row per layer for the per-layer traces, then one row
    /// per fixed-point iteration, then a summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,index,value\n");
        for (l, mu) in self.mu_trace.iter().enumerate() {
            writeln!(s, "mu,{l},{mu:.11e}").unwrap();
        }
        for (l, r) in self.covariance_rank.iter().enumerate() {
            writeln!(s, "covariance_rank,{l},{r}").unwrap();
        }
        for (t, r) in self.residuals.iter().enumerate() {
            writeln!(s, "residual,{t},{r:.11e}").unwrap();
        }
        if let Some(est) = self.spectral_radius {
            writeln!(s, "spectral_radius,0,{:.11e}", est.rho).unwrap();
            writeln!(s, "spectral_converged,0,{}", est.converged as u8).unwrap();
        }
        writeln!(s, "pairwise_collapse,0,{:.11e}", self.pairwise_collapse).unwrap();
        s
    }
}

/// Per-layer μ and covariance rank of a model's forward pass, with the
/// input features as entry 0.
pub fn analyze_model(
    model: &Model,
    topo: &Topology,
    x: &Tensor,
    masks: Option<&[LayerMask]>,
    spectral: Option<SpectralOptions>,
) -> Result<DynamicsReport> {
    let outputs = model.predict(topo, x, masks)?;
    let mut states = vec![x.clone()];
    states.extend(outputs);
    let mut report = DynamicsReport {
        mu_trace: states.iter().map(oversmoothing_mu).collect(),
        ..DynamicsReport::default()
    };
    for s in &states {
        report.covariance_rank.push(numerical_rank(&feature_covariance(s)?, DEFAULT_RANK_TOL));
    }
    let last_hidden = &states[states.len().saturating_sub(2)];
    report.pairwise_collapse = pairwise_collapse(last_hidden);
    if let (Some(opts), true) = (spectral, model.depth() >= 2) {
        // Jacobian of the last hidden-to-hidden layer at its actual input.
        let l = model.depth() - 2;
        if model.layers[l].shape.d_in == model.layers[l].shape.d_out() {
            let map = ModelLayerMap {
                model,
                topo,
                layer: l,
                mask: masks.map(|m| &m[l]),
            };
            let at = states[l].clone();
            report.spectral_radius = Some(spectral_radius(&JacobianOperator { map: &map, at }, opts)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mu_of_constant_and_antipodal_rows() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(oversmoothing_mu(&c), 0.0);
        let a = Tensor::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap();
        assert!((oversmoothing_mu(&a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn covariance_of_identical_rows_is_zero() {
        let x = Tensor::from_rows(&vec![vec![3.0, 1.0]; 4]).unwrap();
        let c = feature_covariance(&x).unwrap();
        assert_eq!(c, Tensor::zeros(2, 2));
        assert_eq!(numerical_rank(&c, DEFAULT_RANK_TOL), 0);
        assert!(feature_covariance(&Tensor::zeros(1, 3)).is_err());
    }

    #[test]
    fn halving_map_converges_in_34_steps() {
        let f = FnMap {
            shape: (1, 1),
            f: |x: &Tensor| Ok(x.scale(0.5)),
        };
        let r = iterate_to_fixed_point(&f, &Tensor::scalar(1.0), 100, 1e-10).unwrap();
        assert!(r.converged);
        assert_eq!(r.steps, 34);
        assert!(r.x.get(0, 0).abs() < 1e-10);
    }

    #[test]
    fn identity_map_converges_in_one_step() {
        let f = FnMap {
            shape: (2, 2),
            f: |x: &Tensor| Ok(x.clone()),
        };
        let x0 = Tensor::from_fn(2, 2, |i, j| (i + j) as f64);
        let r = iterate_to_fixed_point(&f, &x0, 10, 1e-12).unwrap();
        assert!(r.converged && r.steps == 1 && r.x == x0);
    }

    #[test]
    fn divergence_is_flagged() {
        let f = FnMap {
            shape: (1, 1),
            f: |x: &Tensor| Ok(x.scale(10.0)),
        };
        let r = iterate_to_fixed_point(&f, &Tensor::scalar(1.0), 100, 1e-10).unwrap();
        assert!(r.diverged && !r.converged);
    }

    #[test]
    fn zero_direction_is_rejected() {
        let f = FnMap {
            shape: (2, 1),
            f: |x: &Tensor| Ok(x.clone()),
        };
        assert!(jacobian_vector_product(&f, &Tensor::zeros(2, 1), &Tensor::zeros(2, 1)).is_err());
    }
}
