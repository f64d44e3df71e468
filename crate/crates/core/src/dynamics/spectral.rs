use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::eigen::eigenvalues;
use crate::autodiff::{dot, Tensor};
use crate::error::{Error, Result};

/// A square linear map on flat vectors.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl LinearOperator for Tensor {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows() != self.cols() || v.len() != self.cols() {
            return Err(Error::ShapeMismatch {
                op: "operator apply",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows()).map(|i| dot(self.row(i), v)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralOptions {
    pub max_iters: usize,
    /// Relative tolerance on successive estimates.
    pub tol: f64,
    pub seed: u64,
    /// Subspace dimension; 1 is plain power iteration.
    pub block: usize,
    /// Number of trailing estimates that must agree within `tol`.
    pub window: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-10,
            seed: 0,
            block: 4,
            window: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub rho: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Orthonormalizes the columns of `q` (each a `Vec`) in place with two
/// passes of modified Gram-Schmidt. Columns that vanish are replaced by
/// fresh random directions.
fn orthonormalize(q: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    for j in 0..q.len() {
        let original = norm(&q[j]);
        for _attempt in 0..4 {
            for _pass in 0..2 {
                for k in 0..j {
                    let (head, tail) = q.split_at_mut(j);
                    let c = dot(&head[k], &tail[0]);
                    for (x, y) in tail[0].iter_mut().zip(&head[k]) {
                        *x -= c * y;
                    }
                }
            }
            let nrm = norm(&q[j]);
            if nrm > 1e-10 * original.max(f64::MIN_POSITIVE) && nrm > 0.0 {
                for x in q[j].iter_mut() {
                    *x /= nrm;
                }
                break;
            }
            for x in q[j].iter_mut() {
                *x = StandardNormal.sample(rng);
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Dominant eigenvalue modulus by subspace iteration with Rayleigh-Ritz
/// projection. A block of two or more captures complex-conjugate dominant
/// pairs. Converged when the last `window` estimates agree within `tol`;
/// otherwise the maximum over that window is reported.
pub fn spectral_radius(op: &dyn LinearOperator, opts: SpectralOptions) -> Result<SpectralEstimate> {
    let n = op.dim();
    if opts.max_iters == 0 {
        return Err(Error::invalid("spectral_radius needs at least one iteration"));
    }
    if n == 0 {
        return Err(Error::invalid("spectral_radius of an empty operator"));
    }
    let p = opts.block.clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut q: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    orthonormalize(&mut q, &mut rng);

    let window = opts.window.max(2);
    let mut history: Vec<f64> = Vec::new();
    for it in 1..=opts.max_iters {
        let z: Vec<Vec<f64>> = q.iter().map(|col| op.apply(col)).collect::<Result<_>>()?;
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear operator output".into()));
        }
        // Rayleigh quotients carry their denominators so that exactly
        // representable spectra come out exact.
        let b = Tensor::from_fn(p, p, |i, j| dot(&q[i], &z[j]) / dot(&q[i], &q[i]));
        let rho = eigenvalues(&b).iter().fold(0.0f64, |m, c| m.max(c.abs()));
        history.push(rho);
        if history.len() >= window {
            let tail = &history[history.len() - window..];
            let hi = tail.iter().cloned().fold(f64::MIN, f64::max);
            let lo = tail.iter().cloned().fold(f64::MAX, f64::min);
            if hi - lo <= opts.tol * hi.max(f64::MIN_POSITIVE) || hi == 0.0 {
                return Ok(SpectralEstimate {
                    rho,
                    converged: true,
                    iterations: it,
                });
            }
        }
        q = z;
        orthonormalize(&mut q, &mut rng);
    }
    let tail = &history[history.len().saturating_sub(window)..];
    Ok(SpectralEstimate {
        rho: tail.iter().cloned().fold(0.0, f64::max),
        converged: false,
        iterations: opts.max_iters,
    })
}
