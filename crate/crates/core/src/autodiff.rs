//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! The tape records a fixed set of matrix primitives in topological order.
//! [`Tape::backward`] walks it in reverse from a scalar node and returns the
//! adjoint of every node that the output depends on.

use crate::error::{contract, Result};
use crate::linalg::DenseMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Same shape, or `rhs` a single row broadcast over `lhs` rows.
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: DenseMatrix,
        inv_std: Vec<f64>,
    },
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    /// Mean of squared elementwise differences.
    SquaredError(NodeId, NodeId),
    #[allow(dead_code)]
    StopGrad(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseMatrix,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` when the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.adjoints[id.0].as_ref()
    }

    /// Adjoint of `id`, zero-filled when the output does not depend on it.
    pub fn wrt(&self, id: NodeId) -> DenseMatrix {
        match &self.adjoints[id.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    /// Moves the adjoint out, zero-filled when absent.
    pub fn take(&mut self, id: NodeId) -> DenseMatrix {
        match self.adjoints[id.0].take() {
            Some(m) => m,
            None => {
                let (r, c) = self.shapes[id.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
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

    fn push(&mut self, op: Op, value: DenseMatrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    pub fn leaf(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Elementwise sum; `b` may be a single row that is broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let v = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x + y)
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut out = va.clone();
            for r in 0..out.rows() {
                for (o, &y) in out.row_mut(r).iter_mut().zip(vb.as_slice()) {
                    *o += y;
                }
            }
            out
        } else {
            return Err(contract(
                "tape add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        };
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both 1 x cols).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.shape() != (1, d) || vb.shape() != (1, d) {
            return Err(contract(
                "tape layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let mut normalized = DenseMatrix::zeros(vx.rows(), d);
        let mut out = DenseMatrix::zeros(vx.rows(), d);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let n = (row[c] - mean) * inv;
                normalized.set(r, c, n);
                out.set(r, c, n * vg.get(0, c) + vb.get(0, c));
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            out,
        ))
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return Err(contract(
                "tape gather_rows",
                format!("row {bad} of a {}-row matrix", va.rows()),
            ));
        }
        let mut out = DenseMatrix::zeros(idx.len(), va.cols());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(va.row(i));
        }
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), out))
    }

    /// Places row `k` of `a` at row `idx[k]` of an otherwise zero `n_rows` matrix.
    pub fn scatter_rows(&mut self, a: NodeId, idx: &[usize], n_rows: usize) -> Result<NodeId> {
        let va = self.value(a);
        if idx.len() != va.rows() {
            return Err(contract(
                "tape scatter_rows",
                format!("{} indices for {} rows", idx.len(), va.rows()),
            ));
        }
        let mut seen = vec![false; n_rows];
        for &i in idx {
            if i >= n_rows || seen[i] {
                return Err(contract(
                    "tape scatter_rows",
                    format!("index {i} out of range or repeated"),
                ));
            }
            seen[i] = true;
        }
        let mut out = DenseMatrix::zeros(n_rows, va.cols());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(va.row(k));
        }
        Ok(self.push(Op::ScatterRows(a, idx.to_vec()), out))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Op::Sum(a), DenseMatrix::filled(1, 1, s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(contract("tape mean", "mean of an empty matrix"));
        }
        let s = va.as_slice().iter().sum::<f64>() / va.len() as f64;
        Ok(self.push(Op::Mean(a), DenseMatrix::filled(1, 1, s)))
    }

    /// `mean((a - b)^2)` as a scalar node.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.is_empty() {
            return Err(contract(
                "tape squared_error",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let s = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.len() as f64;
        Ok(self.push(Op::SquaredError(a, b), DenseMatrix::filled(1, 1, s)))
    }

    /// Identity in the forward pass; blocks all adjoint flow.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(Op::StopGrad(a), v)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(contract(
                "tape backward",
                format!("output node has shape {:?}", out.shape()),
            ));
        }
        let mut adj: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        fn accumulate(adj: &mut [Option<DenseMatrix>], id: NodeId, g: DenseMatrix) {
            match &mut adj[id.0] {
                Some(existing) => existing.add_assign_unchecked(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_rhs_t(self.value(*b));
                    let db = self.value(*a).matmul_lhs_t(&g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::Add(a, b) => {
                    let vb = self.value(*b);
                    if vb.shape() == g.shape() {
                        accumulate(&mut adj, *b, g.clone());
                    } else {
                        let mut db = DenseMatrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, &x) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                        accumulate(&mut adj, *b, db);
                    }
                    accumulate(&mut adj, *a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s)),
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut adj, *a, d);
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| gv * gelu_prime(x));
                    accumulate(&mut adj, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let vg = self.value(*gamma);
                    let (rows, d) = normalized.shape();
                    let mut dgamma = DenseMatrix::zeros(1, d);
                    let mut dbeta = DenseMatrix::zeros(1, d);
                    let mut dx = DenseMatrix::zeros(rows, d);
                    for r in 0..rows {
                        let (gr, nr) = (g.row(r), normalized.row(r));
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for c in 0..d {
                            dbeta.as_mut_slice()[c] += gr[c];
                            dgamma.as_mut_slice()[c] += gr[c] * nr[c];
                            let dn = gr[c] * vg.get(0, c);
                            mean_dn += dn;
                            mean_dn_n += dn * nr[c];
                        }
                        mean_dn /= d as f64;
                        mean_dn_n /= d as f64;
                        let inv = inv_std[r];
                        for c in 0..d {
                            let dn = gr[c] * vg.get(0, c);
                            dx.set(r, c, inv * (dn - mean_dn - nr[c] * mean_dn_n));
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gamma, dgamma);
                    accumulate(&mut adj, *beta, dbeta);
                }
                Op::GatherRows(a, idx) => {
                    let va = self.value(*a);
                    let mut d = DenseMatrix::zeros(va.rows(), va.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::ScatterRows(a, idx) => {
                    let va = self.value(*a);
                    let mut d = DenseMatrix::zeros(va.rows(), va.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        d.row_mut(k).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut adj, *a, DenseMatrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let v = g.get(0, 0) / (r * c) as f64;
                    accumulate(&mut adj, *a, DenseMatrix::filled(r, c, v));
                }
                Op::SquaredError(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.get(0, 0) / va.len() as f64;
                    let da = va.zip_map(vb, |x, y| k * (x - y));
                    accumulate(&mut adj, *b, da.scale(-1.0));
                    accumulate(&mut adj, *a, da);
                }
                Op::StopGrad(_) => {}
            }
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseVector;
    use crate::rng::Rng;

    fn column(v: &[f64]) -> DenseMatrix {
        DenseMatrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_form_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(column(&[1.0, 2.0]));
        let xt = t.transpose(x);
        let f = t.matmul(xt, x).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x), column(&[2.0, 4.0]));
    }

    #[test]
    fn least_squares_gradient_is_residual_outer_input() {
        let mut rng = Rng::new(9);
        let w = DenseMatrix::from_fn(3, 4, |_, _| rng.standard_normal());
        let x: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
        let y: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();

        let mut t = Tape::new();
        let wn = t.leaf(w.clone());
        let xn = t.leaf(column(&x));
        let yn = t.leaf(column(&y));
        let pred = t.matmul(wn, xn).unwrap();
        let se = t.squared_error(pred, yn).unwrap();
        let f = t.scale(se, 3.0 / 2.0);
        let g = t.backward(f).unwrap();

        let resid = w
            .matvec(&DenseVector::from_slice(&x))
            .unwrap()
            .sub(&DenseVector::from_slice(&y));
        let closed = DenseMatrix::outer(&resid, &DenseVector::from_slice(&x));
        assert!(g.wrt(wn).sub(&closed).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(column(&[1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut t = Tape::new();
        let x = t.leaf(column(&[1.0, -3.0]));
        let y = t.stop_grad(x);
        let s = t.squared_error(x, y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x), DenseMatrix::zeros(2, 1));
    }

    #[test]
    fn scatter_rejects_repeated_index() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::zeros(2, 3));
        assert!(t.scatter_rows(x, &[1, 1], 4).is_err());
        assert!(t.scatter_rows(x, &[0, 4], 4).is_err());
        assert!(t.gather_rows(x, &[2]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_prime(x)).abs() < 1e-8);
        }
    }
}
