//! Small dense eigenvalue routines.

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }

    fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }

    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }

    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }

    fn sqrt(self) -> Self {
        let r = self.abs();
        let re = ((r + self.re) / 2.0).max(0.0).sqrt();
        let im = ((r - self.re) / 2.0).max(0.0).sqrt();
        Self::new(re, if self.im < 0.0 { -im } else { im })
    }
}

/// Eigenvalues of a small real square matrix by shifted complex QR
/// iteration with deflation.
pub fn eigenvalues(m: &Tensor) -> Vec<Complex> {
    let n = m.rows();
    assert_eq!(n, m.cols(), "eigenvalues needs a square matrix");
    let mut a: Vec<Vec<Complex>> = (0..n)
        .map(|i| (0..n).map(|j| Complex::new(m.get(i, j), 0.0)).collect())
        .collect();
    let scale = m.data().iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let mut out = Vec::with_capacity(n);
    if scale == 0.0 {
        return vec![Complex::ZERO; n];
    }
    let mut size = n;
    let mut iter = 0usize;
    while size > 0 {
        if size == 1 {
            out.push(a[0][0]);
            break;
        }
        let k = size - 1;
        // Without a Hessenberg reduction the whole trailing row must vanish.
        let sub = a[k][..k].iter().fold(0.0f64, |m, z| m.max(z.abs()));
        let diag = a[k][k].abs() + a[k - 1][k - 1].abs();
        if sub <= f64::EPSILON * diag.max(scale * 1e-3) || iter > 500 {
            out.push(a[k][k]);
            size -= 1;
            iter = 0;
            continue;
        }
        iter += 1;
        // Wilkinson shift from the trailing 2×2 block, with an occasional
        // exceptional shift to break cycles.
        let (p, q, r, s) = (a[k - 1][k - 1], a[k - 1][k], a[k][k - 1], a[k][k]);
        let half_tr = p.add(s).scale(0.5);
        let det = p.mul(s).sub(q.mul(r));
        let disc = half_tr.mul(half_tr).sub(det).sqrt();
        let (l1, l2) = (half_tr.add(disc), half_tr.sub(disc));
        let mut mu = if l1.sub(s).abs() < l2.sub(s).abs() { l1 } else { l2 };
        if iter % 11 == 10 {
            mu = mu.add(Complex::new(sub, sub));
        }
        qr_step(&mut a, size, mu);
    }
    out
}

/// One shifted QR step `A - μI = QR`, `A ← RQ + μI` on the leading
/// `size × size` block, via Givens rotations.
fn qr_step(a: &mut [Vec<Complex>], size: usize, mu: Complex) {
    for (i, row) in a.iter_mut().enumerate().take(size) {
        row[i] = row[i].sub(mu);
    }
    let mut rots = Vec::with_capacity(size);
    for k in 0..size - 1 {
        for sub_row in k + 1..size {
            let (x, y) = (a[k][k], a[sub_row][k]);
            let ny = y.abs();
            if ny == 0.0 {
                continue;
            }
            let r = x.abs().hypot(ny);
            let (c, s) = (x.scale(1.0 / r), y.scale(1.0 / r));
            for j in 0..size {
                let (u, v) = (a[k][j], a[sub_row][j]);
                a[k][j] = c.conj().mul(u).add(s.conj().mul(v));
                a[sub_row][j] = Complex::ZERO.sub(s).mul(u).add(c.mul(v));
            }
            rots.push((k, sub_row, c, s));
        }
    }
    for &(k, sub_row, c, s) in &rots {
        for row in a.iter_mut().take(size) {
            let (u, v) = (row[k], row[sub_row]);
            row[k] = u.mul(c).add(v.mul(s));
            row[sub_row] = Complex::ZERO.sub(u.mul(s.conj())).add(v.mul(c.conj()));
        }
    }
    for (i, row) in a.iter_mut().enumerate().take(size) {
        row[i] = row[i].add(mu);
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
/// in descending order.
pub fn symmetric_eigenvalues(m: &Tensor) -> Vec<f64> {
    let n = m.rows();
    assert_eq!(n, m.cols(), "symmetric_eigenvalues needs a square matrix");
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        let total: f64 = a.data().iter().map(|v| v * v).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moduli(m: &Tensor) -> Vec<f64> {
        let mut v: Vec<f64> = eigenvalues(m).iter().map(|c| c.abs()).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    #[test]
    fn rotation_has_unit_complex_pair() {
        let m = Tensor::from_rows(&[vec![0.0, -2.0], vec![2.0, 0.0]]).unwrap();
        let ev = eigenvalues(&m);
        for e in ev {
            assert!((e.abs() - 2.0).abs() < 1e-12);
            assert!(e.re.abs() < 1e-12);
        }
    }

    #[test]
    fn triangular_diagonal() {
        let m = Tensor::from_rows(&[vec![3.0, 1.0, 4.0], vec![0.0, -5.0, 9.0], vec![0.0, 0.0, 0.5]]).unwrap();
        assert_eq!(
            moduli(&m).iter().map(|v| (v * 1e9).round() / 1e9).collect::<Vec<_>>(),
            vec![5.0, 3.0, 0.5]
        );
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        let m = Tensor::from_rows(&[vec![2.0, 1.0, 0.0], vec![1.0, 2.0, 1.0], vec![0.0, 1.0, 2.0]]).unwrap();
        let ev = symmetric_eigenvalues(&m);
        let s = 2f64.sqrt();
        for (a, b) in ev.iter().zip([2.0 + s, 2.0, 2.0 - s]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
