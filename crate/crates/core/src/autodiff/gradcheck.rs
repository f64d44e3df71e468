use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise relative error over all inputs.
    pub max_rel_err: f64,
    /// Largest elementwise absolute error.
    pub max_abs_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is zero are judged by absolute error.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-4);
    (a - n).abs() / denom
}

/// Compares the reverse-mode gradients returned by `f` against central
/// finite differences of its value. `f` maps the inputs to
/// `(value, gradients)`.
pub fn gradient_check<F>(mut f: F, point: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = f(point)?;
    let mut work: Vec<Tensor> = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for k in 0..point.len() {
        let (r, c) = point[k].shape();
        let mut num = Tensor::zeros(r, c);
        for j in 0..point[k].len() {
            let x0 = point[k].data()[j];
            work[k].data_mut()[j] = x0 + step;
            let (fp, _) = f(&work)?;
            work[k].data_mut()[j] = x0 - step;
            let (fm, _) = f(&work)?;
            work[k].data_mut()[j] = x0;
            let g = (fp - fm) / (2.0 * step);
            num.data_mut()[j] = g;
            let a = analytic[k].data()[j];
            max_rel = max_rel.max(relative_error(a, g));
            max_abs = max_abs.max((a - g).abs());
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        analytic,
        numeric,
    })
}
