//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; nodes are
//! stored in creation order, so that order is already topological and
//! [`Graph::backward`] simply walks the tape in reverse.
//!
//! ```
//! use tamperscope::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![3.0]));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::rc::Rc;

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Guard below which a vector is treated as having no direction.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    MeanRows(NodeId),
    NormalizeRows(NodeId),
    Reshape(NodeId),
    Gather(NodeId, Rc<[usize]>),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    BceLogits(NodeId, Rc<[f64]>),
    Dice(NodeId, Rc<[f64]>, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-owner computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for nodes that do not require a gradient.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Row-wise softmax of a matrix, stabilized by subtracting each row's maximum.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        softmax_row(&x.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(&[m, n], out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2()?;
        let (k2, n) = vb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", va, vb));
        }
        let out = Tensor::new(&[m, n], matmul_raw(va.data(), vb.data(), m, k, n))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2()?;
        let (n, k2) = vb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul_nt", va, vb));
        }
        let out = Tensor::new(&[m, n], matmul_nt_raw(va.data(), vb.data(), m, k, n))?;
        Ok(self.derived(out, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.derived(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, n) = va.dims2()?;
        if vb.len() != n || vb.rank() != 1 {
            return Err(shape_err(name, va, vb));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(va.row(i).iter().zip(vb.data()).map(|(&x, &y)| f(x, y)));
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.derived(out, op, &[a, b]))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.row_broadcast("add_row", a, bias, |x, y| x + y, Op::AddRow(a, bias))
    }

    /// Multiplies every row of an m×n matrix by a length-n vector.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        self.row_broadcast("mul_row", a, v, |x, y| x * y, Op::MulRow(a, v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|x| x * s);
        self.derived(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.max(0.0));
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let out = softmax_rows(self.value(a))?;
        Ok(self.derived(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            log_softmax_row(va.row(i), &mut out[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.derived(out, Op::LogSoftmaxRows(a), &[a]))
    }

    /// Column means of an m×n matrix: the average over all m rows.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(va.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.derived(Tensor::vector(out), Op::MeanRows(a), &[a]))
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        let mut out = va.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > EPS_NORM) {
                return Err(Error::DegenerateVector {
                    norm,
                    eps: EPS_NORM,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.derived(out, Op::NormalizeRows(a), &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    /// `out[i] = a[index[i]]` (flat indices), laid out with `shape`.
    pub fn gather(&mut self, a: NodeId, index: Rc<[usize]>, shape: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= va.len()) {
            return Err(Error::dim(format!(
                "gather index {bad} out of range for {:?}",
                va.shape()
            )));
        }
        let data = index.iter().map(|&i| va.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, Op::Gather(a, index), &[a]))
    }

    /// Concatenates the flat data of `parts` and lays it out as `shape`.
    pub fn concat(&mut self, parts: &[NodeId], shape: &[usize]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let out = Tensor::scalar(va.sum() / va.len() as f64);
        self.derived(out, Op::Mean(a), &[a])
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_logits(&mut self, logits: NodeId, target: Rc<[f64]>) -> Result<NodeId> {
        let va = self.value(logits);
        if va.len() != target.len() {
            return Err(Error::dim(format!(
                "bce: logits {:?} vs {} targets",
                va.shape(),
                target.len()
            )));
        }
        let total: f64 = va
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&x, &m)| softplus(x) - x * m)
            .sum();
        let out = Tensor::scalar(total / va.len() as f64);
        Ok(self.derived(out, Op::BceLogits(logits, target), &[logits]))
    }

    /// Smoothed soft Dice loss `1 − (2Σpm + ε)/(Σp + Σm + ε)` with `p = σ(logits)`.
    pub fn dice_logits(&mut self, logits: NodeId, target: Rc<[f64]>, eps: f64) -> Result<NodeId> {
        let va = self.value(logits);
        if va.len() != target.len() {
            return Err(Error::dim(format!(
                "dice: logits {:?} vs {} targets",
                va.shape(),
                target.len()
            )));
        }
        let (mut inter, mut sp, mut sm) = (0.0, 0.0, 0.0);
        for (&x, &m) in va.data().iter().zip(target.iter()) {
            let p = sigmoid(x);
            inter += p * m;
            sp += p;
            sm += m;
        }
        let out = Tensor::scalar(1.0 - (2.0 * inter + eps) / (sp + sm + eps));
        Ok(self.derived(out, Op::Dice(logits, target, eps), &[logits]))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Some(Tensor::new(n.value.shape(), g).expect("grad shape")),
                _ if n.requires_grad => Some(Tensor::zeros(n.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                self.accumulate(grads, a, |d| add_into(d, &matmul_nt_raw(g, vb.data(), m, n, k)));
                self.accumulate(grads, b, |d| add_into(d, &matmul_tn_raw(va.data(), g, m, k, n)));
            }
            &Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                self.accumulate(grads, a, |d| add_into(d, &matmul_raw(g, vb.data(), m, n, k)));
                self.accumulate(grads, b, |d| add_into(d, &matmul_tn_raw(g, va.data(), m, n, k)));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, g));
                self.accumulate(grads, b, |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, g));
                self.accumulate(grads, b, |d| d.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                self.accumulate(grads, a, |d| {
                    for ((d, s), y) in d.iter_mut().zip(g).zip(vb.data()) {
                        *d += s * y;
                    }
                });
                self.accumulate(grads, b, |d| {
                    for ((d, s), x) in d.iter_mut().zip(g).zip(va.data()) {
                        *d += s * x;
                    }
                });
            }
            &Op::AddRow(a, b) => {
                let n = self.value(b).len();
                self.accumulate(grads, a, |d| add_into(d, g));
                self.accumulate(grads, b, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            &Op::MulRow(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let n = vb.len();
                self.accumulate(grads, a, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, s), y) in drow.iter_mut().zip(grow).zip(vb.data()) {
                            *d += s * y;
                        }
                    }
                });
                self.accumulate(grads, b, |d| {
                    for (grow, arow) in g.chunks(n).zip(va.data().chunks(n)) {
                        for ((d, s), x) in d.iter_mut().zip(grow).zip(arow) {
                            *d += s * x;
                        }
                    }
                });
            }
            &Op::Scale(a, s) => {
                self.accumulate(grads, a, |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += s * v));
            }
            &Op::Relu(a) => {
                let va = self.value(a);
                self.accumulate(grads, a, |d| {
                    for ((d, s), x) in d.iter_mut().zip(g).zip(va.data()) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.shape()[1];
                self.accumulate(grads, a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(s, y)| s * y).sum();
                        for ((d, s), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (s - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let n = y.shape()[1];
                self.accumulate(grads, a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((d, s), ly) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += s - ly.exp() * total;
                        }
                    }
                });
            }
            &Op::MeanRows(a) => {
                let m = self.value(a).shape()[0] as f64;
                let n = g.len();
                self.accumulate(grads, a, |d| {
                    for drow in d.chunks_mut(n) {
                        for (d, s) in drow.iter_mut().zip(g) {
                            *d += s / m;
                        }
                    }
                });
            }
            &Op::NormalizeRows(a) => {
                let (x, y) = (self.value(a), &node.value);
                let n = y.shape()[1];
                self.accumulate(grads, a, |d| {
                    for (((drow, grow), yrow), xrow) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(y.data().chunks(n))
                        .zip(x.data().chunks(n))
                    {
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = grow.iter().zip(yrow).map(|(s, y)| s * y).sum();
                        for ((d, s), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (s - y * dot) / norm;
                        }
                    }
                });
            }
            &Op::Reshape(a) => self.accumulate(grads, a, |d| add_into(d, g)),
            Op::Gather(a, index) => {
                self.accumulate(grads, *a, |d| {
                    for (&i, s) in index.iter().zip(g) {
                        d[i] += s;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            &Op::Sum(a) => self.accumulate(grads, a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                self.accumulate(grads, a, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::BceLogits(a, target) => {
                let va = self.value(*a);
                let n = va.len() as f64;
                self.accumulate(grads, *a, |d| {
                    for ((d, &x), &m) in d.iter_mut().zip(va.data()).zip(target.iter()) {
                        *d += g[0] * (sigmoid(x) - m) / n;
                    }
                });
            }
            Op::Dice(a, target, eps) => {
                let va = self.value(*a);
                let p: Vec<f64> = va.data().iter().map(|&x| sigmoid(x)).collect();
                let inter: f64 = p.iter().zip(target.iter()).map(|(p, m)| p * m).sum();
                let denom = p.iter().sum::<f64>() + target.iter().sum::<f64>() + eps;
                let numer = 2.0 * inter + eps;
                self.accumulate(grads, *a, |d| {
                    for ((d, &p), &m) in d.iter_mut().zip(&p).zip(target.iter()) {
                        let dl_dp = -(2.0 * m * denom - numer) / (denom * denom);
                        *d += g[0] * dl_dp * p * (1.0 - p);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
        assert_eq!(g.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.7 - 1.0);
        let i3 = g.constant(Tensor::identity(3));
        let xn = g.constant(x.clone());
        let y = g.matmul(i3, xn).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("and [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_rows_examples() {
        let x = Tensor::matrix(3, 3, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        for v in y.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let expected = [0.09003, 0.24473, 0.66524];
        for (v, e) in y.row(1).iter().zip(expected) {
            assert!((v - e).abs() < 1e-5, "{v} vs {e}");
        }
        assert!((y.row(2)[0] - 1.0).abs() < 1e-12);
        assert!(y.row(2)[1].abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(g.normalize_rows(z), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![2.0]));
        let p = g.param(Tensor::vector(vec![3.0]));
        let y = g.mul(c, p).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![3.0, 1.0]));
        let q = g.param(Tensor::vector(vec![5.0]));
        let y = g.sum(p);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(q).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![3.0, 1.0]));
        assert!(g.backward(p).is_err());
    }
}
