//! Reverse-mode gradient tape over dense matrices.
//!
//! Values live on the [`Tape`] and are addressed by [`Var`] handles. Every
//! primitive records enough of its inputs to replay the adjoint; nodes are
//! appended in evaluation order, so walking the node list backwards is a
//! valid topological order for [`Tape::backward`].

use std::rc::Rc;

use super::activation::Activation;
use super::edges::EdgeList;
use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    EdgeSoftmax(Var, Rc<EdgeList>),
    EdgeAggregate(Var, Var, Rc<EdgeList>),
    HeadDot(Var, Var),
    HeadMean(Var, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Rc<[usize]>,
        rows: Rc<[usize]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend
    /// on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds the `1 × c` row vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: (n, c),
                right: self.shape(row),
            });
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Act(a, act), rg)
    }

    /// `out[e] = a[index[e]]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let src = self.value(a);
        let (n, c) = src.shape();
        let mut value = Tensor::zeros(index.len(), c);
        for (e, &i) in index.iter().enumerate() {
            if i >= n {
                return Err(Error::invalid(format!("gather index {i} out of range {n}")));
            }
            value.row_mut(e).copy_from_slice(src.row(i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Gather(a, index), rg))
    }

    /// `out[index[e]] += a[e]`, producing `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: Rc<[usize]>, n_out: usize) -> Result<Var> {
        let src = self.value(a);
        let (e_len, c) = src.shape();
        if e_len != index.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                left: (e_len, c),
                right: (index.len(), 1),
            });
        }
        let mut value = Tensor::zeros(n_out, c);
        for (e, &i) in index.iter().enumerate() {
            if i >= n_out {
                return Err(Error::invalid(format!("scatter index {i} out of range {n_out}")));
            }
            for (o, x) in value.row_mut(i).iter_mut().zip(src.row(e)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ScatterAdd(a, index), rg))
    }

    /// Softmax of each column over every destination's neighbor segment.
    /// Input and output are `E × H`.
    pub fn edge_softmax(&mut self, scores: Var, edges: Rc<EdgeList>) -> Result<Var> {
        let s = self.value(scores);
        let (e_len, h) = s.shape();
        if e_len != edges.len() {
            return Err(Error::ShapeMismatch {
                op: "edge_softmax",
                left: (e_len, h),
                right: (edges.len(), h),
            });
        }
        let value = segment_softmax(s, &edges);
        let rg = self.rg(&[scores]);
        Ok(self.push(value, Op::EdgeSoftmax(scores, edges), rg))
    }

    /// Per-head weighted neighbor sum: for head `k`,
    /// `out[dst, k-block] += coef[e, k] · h[src, k-block]`.
    /// `coef` is `E × H`; `h` is `N × (H·F)`.
    pub fn edge_aggregate(&mut self, coef: Var, h: Var, edges: Rc<EdgeList>) -> Result<Var> {
        let (c, x) = (self.value(coef), self.value(h));
        let heads = c.cols();
        if c.rows() != edges.len() || heads == 0 || x.cols() % heads != 0 || x.rows() != edges.n_nodes() {
            return Err(Error::ShapeMismatch {
                op: "edge_aggregate",
                left: c.shape(),
                right: x.shape(),
            });
        }
        let f = x.cols() / heads;
        let mut value = Tensor::zeros(x.rows(), x.cols());
        for (e, (&s, &d)) in edges.src().iter().zip(edges.dst()).enumerate() {
            let ce = c.row(e);
            let xs = x.row(s);
            let out = value.row_mut(d);
            for k in 0..heads {
                let w = ce[k];
                if w == 0.0 {
                    continue;
                }
                for (o, v) in out[k * f..(k + 1) * f].iter_mut().zip(&xs[k * f..(k + 1) * f]) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(&[coef, h]);
        Ok(self.push(value, Op::EdgeAggregate(coef, h, edges), rg))
    }

    /// Per-head dot product: `out[n, k] = Σ_f h[n, k·F + f] · a[k, f]`,
    /// with `a` shaped `H × F`.
    pub fn head_dot(&mut self, h: Var, a: Var) -> Result<Var> {
        let (x, av) = (self.value(h), self.value(a));
        let (heads, f) = av.shape();
        if x.cols() != heads * f {
            return Err(Error::ShapeMismatch {
                op: "head_dot",
                left: x.shape(),
                right: av.shape(),
            });
        }
        let mut value = Tensor::zeros(x.rows(), heads);
        for n in 0..x.rows() {
            let row = x.row(n);
            for k in 0..heads {
                value.set(n, k, dot(&row[k * f..(k + 1) * f], av.row(k)));
            }
        }
        let rg = self.rg(&[h, a]);
        Ok(self.push(value, Op::HeadDot(h, a), rg))
    }

    /// Averages `heads` equal-width column blocks.
    pub fn head_mean(&mut self, h: Var, heads: usize) -> Result<Var> {
        let x = self.value(h);
        if heads == 0 || x.cols() % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "head_mean",
                left: x.shape(),
                right: (heads, 0),
            });
        }
        let f = x.cols() / heads;
        let inv = 1.0 / heads as f64;
        let mut value = Tensor::zeros(x.rows(), f);
        for n in 0..x.rows() {
            let row = x.row(n);
            let out = value.row_mut(n);
            for k in 0..heads {
                for (o, v) in out.iter_mut().zip(&row[k * f..(k + 1) * f]) {
                    *o += v * inv;
                }
            }
        }
        let rg = self.rg(&[h]);
        Ok(self.push(value, Op::HeadMean(h, heads), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean negative log-likelihood of `labels` under a row softmax of
    /// `logits`, restricted to `rows`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>, rows: Rc<[usize]>) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: z.shape(),
                right: (labels.len(), 1),
            });
        }
        if rows.is_empty() {
            return Err(Error::invalid("cross_entropy over an empty row set"));
        }
        let mut total = 0.0;
        for &i in rows.iter() {
            let row = z.row(i);
            let y = labels[i];
            if y >= row.len() {
                return Err(Error::invalid(format!("label {y} out of range {}", row.len())));
            }
            total += log_sum_exp(row) - row[y];
        }
        let value = Tensor::scalar(total / rows.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels,
                rows,
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`. A tape supports a single
    /// backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape; record a new forward pass".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &op, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, idx: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.matmul_t(val(*b))?);
                }
                if needs(*b) {
                    accumulate(grads, *b, val(*a).t_matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*row) {
                    let mut r = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *row, r);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.hadamard(val(*b))?);
                }
                if needs(*b) {
                    accumulate(grads, *b, g.hadamard(val(*a))?);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Act(a, act) => {
                let x = val(*a);
                let y = &self.nodes[idx].value;
                let mut out = g.clone();
                for ((o, &xi), &yi) in out.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *o *= act.derivative(xi, yi);
                }
                accumulate(grads, *a, out);
            }
            Op::Gather(a, index) => {
                let (n, c) = val(*a).shape();
                let mut out = Tensor::zeros(n, c);
                for (e, &i) in index.iter().enumerate() {
                    for (o, x) in out.row_mut(i).iter_mut().zip(g.row(e)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::ScatterAdd(a, index) => {
                let (e_len, c) = val(*a).shape();
                let mut out = Tensor::zeros(e_len, c);
                for (e, &i) in index.iter().enumerate() {
                    out.row_mut(e).copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, out);
            }
            Op::EdgeSoftmax(a, edges) => {
                let y = &self.nodes[idx].value;
                let h = y.cols();
                let mut out = Tensor::zeros(y.rows(), h);
                for node in 0..edges.n_nodes() {
                    let seg = edges.segment(node);
                    for k in 0..h {
                        let inner: f64 = seg.clone().map(|e| y.get(e, k) * g.get(e, k)).sum();
                        for e in seg.clone() {
                            out.set(e, k, y.get(e, k) * (g.get(e, k) - inner));
                        }
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::EdgeAggregate(coef, h, edges) => {
                let (c, x) = (val(*coef), val(*h));
                let heads = c.cols();
                let f = x.cols() / heads;
                if needs(*coef) {
                    let mut gc = Tensor::zeros(c.rows(), heads);
                    for (e, (&s, &d)) in edges.src().iter().zip(edges.dst()).enumerate() {
                        let (gd, xs) = (g.row(d), x.row(s));
                        for k in 0..heads {
                            gc.set(e, k, dot(&gd[k * f..(k + 1) * f], &xs[k * f..(k + 1) * f]));
                        }
                    }
                    accumulate(grads, *coef, gc);
                }
                if needs(*h) {
                    let mut gx = Tensor::zeros(x.rows(), x.cols());
                    for (e, (&s, &d)) in edges.src().iter().zip(edges.dst()).enumerate() {
                        let ce = c.row(e);
                        let gd = g.row(d).to_vec();
                        let out = gx.row_mut(s);
                        for k in 0..heads {
                            let w = ce[k];
                            if w == 0.0 {
                                continue;
                            }
                            for (o, v) in out[k * f..(k + 1) * f].iter_mut().zip(&gd[k * f..(k + 1) * f]) {
                                *o += w * v;
                            }
                        }
                    }
                    accumulate(grads, *h, gx);
                }
            }
            Op::HeadDot(h, a) => {
                let (x, av) = (val(*h), val(*a));
                let (heads, f) = av.shape();
                if needs(*h) {
                    let mut gx = Tensor::zeros(x.rows(), x.cols());
                    for n in 0..x.rows() {
                        let out = gx.row_mut(n);
                        for k in 0..heads {
                            let gk = g.get(n, k);
                            for (o, w) in out[k * f..(k + 1) * f].iter_mut().zip(av.row(k)) {
                                *o += gk * w;
                            }
                        }
                    }
                    accumulate(grads, *h, gx);
                }
                if needs(*a) {
                    let mut ga = Tensor::zeros(heads, f);
                    for n in 0..x.rows() {
                        let row = x.row(n);
                        for k in 0..heads {
                            let gk = g.get(n, k);
                            for (o, v) in ga.row_mut(k).iter_mut().zip(&row[k * f..(k + 1) * f]) {
                                *o += gk * v;
                            }
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::HeadMean(h, heads) => {
                let (n, width) = val(*h).shape();
                let f = width / heads;
                let inv = 1.0 / *heads as f64;
                let mut gx = Tensor::zeros(n, width);
                for i in 0..n {
                    let gi = g.row(i).to_vec();
                    let out = gx.row_mut(i);
                    for k in 0..*heads {
                        for (o, v) in out[k * f..(k + 1) * f].iter_mut().zip(&gi) {
                            *o += v * inv;
                        }
                    }
                }
                accumulate(grads, *h, gx);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Tensor::filled(r, c, g.get(0, 0)));
            }
            Op::CrossEntropy {
                logits,
                labels,
                rows,
            } => {
                let z = val(*logits);
                let scale = g.get(0, 0) / rows.len() as f64;
                let mut gz = Tensor::zeros(z.rows(), z.cols());
                for &i in rows.iter() {
                    let row = z.row(i);
                    let lse = log_sum_exp(row);
                    let out = gz.row_mut(i);
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += scale * (v - lse).exp();
                    }
                    out[labels[i]] -= scale;
                }
                accumulate(grads, *logits, gz);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Column-wise softmax inside each destination segment.
pub(crate) fn segment_softmax(s: &Tensor, edges: &EdgeList) -> Tensor {
    let h = s.cols();
    let mut out = Tensor::zeros(s.rows(), h);
    for node in 0..edges.n_nodes() {
        let seg = edges.segment(node);
        if seg.is_empty() {
            continue;
        }
        for k in 0..h {
            let m = seg.clone().map(|e| s.get(e, k)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in seg.clone() {
                let v = (s.get(e, k) - m).exp();
                out.set(e, k, v);
                z += v;
            }
            for e in seg.clone() {
                out.set(e, k, out.get(e, k) / z);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edges() -> Rc<EdgeList> {
        Rc::new(EdgeList::from_pairs(3, &[(0, 0), (0, 1), (1, 1), (1, 0), (1, 2), (2, 2)]).unwrap())
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::new();
        let w = t.param(Tensor::from_fn(2, 3, |i, j| i as f64 - j as f64));
        let l = t.sum(w);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &Tensor::filled(2, 3, 1.0));
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::filled(2, 2, 0.5));
        let p = t.param(Tensor::filled(3, 1, 2.0));
        let l = t.sum(w);
        let g = t.backward(l).unwrap();
        assert!(g.get(p).is_none());
        assert_eq!(g.get_or_zeros(p, (3, 1)), Tensor::zeros(3, 1));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(1.0));
        let l = t.sum(w);
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(w), Err(Error::Tape(_))));
    }

    #[test]
    fn single_neighbor_softmax_is_one() {
        let e = Rc::new(EdgeList::from_pairs(2, &[(0, 1), (1, 1), (1, 0)]).unwrap());
        let mut t = Tape::new();
        let s = t.constant(Tensor::from_vec(3, 1, vec![3.7, -1.0, 2.0]).unwrap());
        let a = t.edge_softmax(s, e).unwrap();
        assert_eq!(t.value(a).get(0, 0), 1.0);
        let v = t.value(a);
        assert!((v.get(1, 0) + v.get(2, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradients_sum_to_zero() {
        let e = edges();
        let mut t = Tape::new();
        let s = t.param(Tensor::from_fn(6, 2, |i, j| (i as f64 * 0.7 - j as f64).sin()));
        let a = t.edge_softmax(s, e.clone()).unwrap();
        let w = t.constant(Tensor::from_fn(6, 2, |i, j| (i + 2 * j) as f64));
        let p = t.mul(a, w).unwrap();
        let l = t.sum(p);
        for node in 0..3 {
            for k in 0..2 {
                let total: f64 = e.segment(node).map(|i| t.value(a).get(i, k)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let g = t.backward(l).unwrap();
        let gs = g.get(s).unwrap();
        for node in 0..3 {
            for k in 0..2 {
                let total: f64 = e.segment(node).map(|i| gs.get(i, k)).sum();
                assert!(total.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 2));
        let msg = t.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("(2, 3)") && msg.contains("(2, 2)"));
    }
}
