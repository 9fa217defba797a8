//! A small reverse-mode tape over `f64` vectors and matrices.
//!
//! Graphs are built per training example. Nodes store eagerly computed
//! values; `backward` walks the tape in reverse construction order, which
//! is a topological order by construction, accumulating gradients in a
//! fixed deterministic sequence.

use crate::num;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec { m: NodeId, x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Concat { parts: Vec<NodeId> },
    Slice { x: NodeId, start: usize, len: usize },
    Row { m: NodeId, index: usize },
    Dot { a: NodeId, b: NodeId },
    WeightedSum { weights: NodeId, items: Vec<NodeId> },
    Softmax { x: NodeId },
    LogSoftmax { x: NodeId, mask: Option<Vec<bool>> },
    PickNegLog { x: NodeId, index: usize },
    Scale { x: NodeId, c: f64 },
    MulConst { x: NodeId, k: Vec<f64> },
    Sum { parts: Vec<NodeId> },
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

#[derive(Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        debug_assert!(
            value.iter().all(|v| !v.is_nan()),
            "NaN produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn leaf_vec(&mut self, v: &[f64]) -> NodeId {
        self.push(v.to_vec(), v.len(), 1, Op::Leaf)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data.clone(), t.rows(), t.cols(), Op::Leaf)
    }

    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> NodeId {
        let (rows, cols) = (self.nodes[m.0].rows, self.nodes[m.0].cols);
        debug_assert_eq!(self.nodes[x.0].value.len(), cols, "matvec width");
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.nodes[m.0].value[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(&self.nodes[x.0].value) {
                acc += a * b;
            }
            y[r] = acc;
        }
        self.push(y, rows, 1, Op::MatVec { m, x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let n = v.len();
        self.push(v, n, 1, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let n = v.len();
        self.push(v, n, 1, Op::Mul { a, b })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|&a| num::sigmoid(a))
            .collect();
        let n = v.len();
        self.push(v, n, 1, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[x.0].value.iter().map(|a| a.tanh()).collect();
        let n = v.len();
        self.push(v, n, 1, Op::Tanh { x })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        let n = v.len();
        self.push(v, n, 1, Op::Concat { parts: parts.to_vec() })
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x.0].value[start..start + len].to_vec();
        self.push(v, len, 1, Op::Slice { x, start, len })
    }

    pub fn row(&mut self, m: NodeId, index: usize) -> NodeId {
        let cols = self.nodes[m.0].cols;
        debug_assert!(index < self.nodes[m.0].rows, "row index out of range");
        let v = self.nodes[m.0].value[index * cols..(index + 1) * cols].to_vec();
        self.push(v, cols, 1, Op::Row { m, index })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        let v: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![v], 1, 1, Op::Dot { a, b })
    }

    /// `sum_i weights[i] * items[i]` over equal-length vectors.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> NodeId {
        debug_assert_eq!(self.nodes[weights.0].value.len(), items.len());
        let n = self.nodes[items[0].0].value.len();
        let mut v = vec![0.0; n];
        for (i, item) in items.iter().enumerate() {
            let w = self.nodes[weights.0].value[i];
            for (acc, x) in v.iter_mut().zip(&self.nodes[item.0].value) {
                *acc += w * x;
            }
        }
        self.push(
            v,
            n,
            1,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = num::softmax(&self.nodes[x.0].value);
        let n = v.len();
        self.push(v, n, 1, Op::Softmax { x })
    }

    /// Log-softmax with an optional allow-mask: blocked entries receive
    /// negative infinity before normalization, so the distribution
    /// renormalizes over the allowed set.
    pub fn log_softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> NodeId {
        let v = num::masked_log_softmax(&self.nodes[x.0].value, mask);
        let n = v.len();
        self.push(
            v,
            n,
            1,
            Op::LogSoftmax {
                x,
                mask: mask.map(|m| m.to_vec()),
            },
        )
    }

    /// Scalar `-x[index]`, the negative log-likelihood of a pick from a
    /// log-distribution.
    pub fn pick_neg_log(&mut self, x: NodeId, index: usize) -> NodeId {
        let v = -self.nodes[x.0].value[index];
        self.push(vec![v], 1, 1, Op::PickNegLog { x, index })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v: Vec<f64> = self.nodes[x.0].value.iter().map(|a| a * c).collect();
        let n = v.len();
        self.push(v, n, 1, Op::Scale { x, c })
    }

    /// Elementwise product with a constant vector (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, k: Vec<f64>) -> NodeId {
        debug_assert_eq!(self.nodes[x.0].value.len(), k.len());
        let v: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .zip(&k)
            .map(|(a, b)| a * b)
            .collect();
        let n = v.len();
        self.push(v, n, 1, Op::MulConst { x, k })
    }

    /// Elementwise sum of same-shape nodes, left to right.
    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.nodes[parts[0].0].value.len();
        let mut v = vec![0.0; n];
        for p in parts {
            for (acc, x) in v.iter_mut().zip(&self.nodes[p.0].value) {
                *acc += x;
            }
        }
        self.push(v, n, 1, Op::Sum { parts: parts.to_vec() })
    }

    /// Reverse pass from a scalar node. Returns one gradient buffer per
    /// node, indexable by `NodeId`.
    pub fn backward(&self, loss: NodeId) -> Grads {
        debug_assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut g: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        g[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if g[i].iter().all(|&v| v == 0.0) {
                continue;
            }
            let grad = g[i].clone();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatVec { m, x } => {
                    let cols = self.nodes[m.0].cols;
                    let xv = &self.nodes[x.0].value;
                    let mv = &self.nodes[m.0].value;
                    for (r, gr) in grad.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            g[m.0][r * cols + c] += gr * xv[c];
                            g[x.0][c] += gr * mv[r * cols + c];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (j, gr) in grad.iter().enumerate() {
                        g[a.0][j] += gr;
                        g[b.0][j] += gr;
                    }
                }
                Op::Mul { a, b } => {
                    for (j, gr) in grad.iter().enumerate() {
                        let av = self.nodes[a.0].value[j];
                        let bv = self.nodes[b.0].value[j];
                        g[a.0][j] += gr * bv;
                        g[b.0][j] += gr * av;
                    }
                }
                Op::Sigmoid { x } => {
                    for (j, gr) in grad.iter().enumerate() {
                        let y = node.value[j];
                        g[x.0][j] += gr * y * (1.0 - y);
                    }
                }
                Op::Tanh { x } => {
                    for (j, gr) in grad.iter().enumerate() {
                        let y = node.value[j];
                        g[x.0][j] += gr * (1.0 - y * y);
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        for j in 0..n {
                            g[p.0][j] += grad[off + j];
                        }
                        off += n;
                    }
                }
                Op::Slice { x, start, len } => {
                    for j in 0..*len {
                        g[x.0][start + j] += grad[j];
                    }
                }
                Op::Row { m, index } => {
                    let cols = self.nodes[m.0].cols;
                    for (j, gr) in grad.iter().enumerate() {
                        g[m.0][index * cols + j] += gr;
                    }
                }
                Op::Dot { a, b } => {
                    let gr = grad[0];
                    for j in 0..self.nodes[a.0].value.len() {
                        g[a.0][j] += gr * self.nodes[b.0].value[j];
                        g[b.0][j] += gr * self.nodes[a.0].value[j];
                    }
                }
                Op::WeightedSum { weights, items } => {
                    for (k, item) in items.iter().enumerate() {
                        let w = self.nodes[weights.0].value[k];
                        let mut acc = 0.0;
                        for (j, gr) in grad.iter().enumerate() {
                            g[item.0][j] += w * gr;
                            acc += gr * self.nodes[item.0].value[j];
                        }
                        g[weights.0][k] += acc;
                    }
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let dot: f64 = grad.iter().zip(y).map(|(gr, yj)| gr * yj).sum();
                    for (j, gr) in grad.iter().enumerate() {
                        g[x.0][j] += y[j] * (gr - dot);
                    }
                }
                Op::LogSoftmax { x, mask } => {
                    let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                    let total: f64 = grad
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| allowed(*j))
                        .map(|(_, gr)| *gr)
                        .sum();
                    for j in 0..grad.len() {
                        if allowed(j) {
                            let p = node.value[j].exp();
                            g[x.0][j] += grad[j] - p * total;
                        }
                    }
                }
                Op::PickNegLog { x, index } => {
                    g[x.0][*index] -= grad[0];
                }
                Op::Scale { x, c } => {
                    for (j, gr) in grad.iter().enumerate() {
                        g[x.0][j] += gr * c;
                    }
                }
                Op::MulConst { x, k } => {
                    for (j, gr) in grad.iter().enumerate() {
                        g[x.0][j] += gr * k[j];
                    }
                }
                Op::Sum { parts } => {
                    for p in parts {
                        for (j, gr) in grad.iter().enumerate() {
                            g[p.0][j] += gr;
                        }
                    }
                }
            }
        }
        Grads(g)
    }
}

pub(crate) struct Grads(Vec<Vec<f64>>);

impl Grads {
    pub fn of(&self, id: NodeId) -> &[f64] {
        &self.0[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Finite-difference check: `build` constructs a scalar loss from leaf
    /// nodes created from `inputs`; analytic gradients must match central
    /// differences on every input scalar.
    fn fd_check(inputs: &[Vec<f64>], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let eval = |ins: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = ins.iter().map(|v| tape.leaf_vec(v)).collect();
            let loss = build(&mut tape, &ids);
            tape.scalar(loss)
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf_vec(v)).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k][j] += eps;
                let mut minus = inputs.to_vec();
                minus[k][j] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = grads.of(ids[k])[j];
                let denom = an.abs().max(fd.abs()).max(1e-3);
                assert!(
                    ((an - fd) / denom).abs() < 1e-6,
                    "input {k}[{j}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn v(vals: &[f64]) -> Vec<f64> {
        vals.to_vec()
    }

    #[test]
    fn grad_matvec() {
        // loss = w . (M x); check dM and dx against central differences.
        let m0 = vec![0.3, -0.7, 1.2, 0.5, 0.1, -0.4];
        let x0 = vec![0.9, -0.2, 0.6];
        let w = vec![1.0, -1.5];
        let eval = |mdata: &[f64], xdata: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let m = tape.leaf_tensor(&Tensor::matrix(2, 3, mdata.to_vec()));
            let x = tape.leaf_vec(xdata);
            let y = tape.matvec(m, x);
            let wid = tape.leaf_vec(&w);
            let loss = tape.dot(wid, y);
            tape.scalar(loss)
        };

        let mut tape = Tape::new();
        let m = tape.leaf_tensor(&Tensor::matrix(2, 3, m0.clone()));
        let x = tape.leaf_vec(&x0);
        let y = tape.matvec(m, x);
        let wid = tape.leaf_vec(&w);
        let loss = tape.dot(wid, y);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        for j in 0..m0.len() {
            let mut plus = m0.clone();
            plus[j] += eps;
            let mut minus = m0.clone();
            minus[j] -= eps;
            let fd = (eval(&plus, &x0) - eval(&minus, &x0)) / (2.0 * eps);
            assert!((grads.of(m)[j] - fd).abs() < 1e-8, "dM[{j}]");
        }
        for j in 0..x0.len() {
            let mut plus = x0.clone();
            plus[j] += eps;
            let mut minus = x0.clone();
            minus[j] -= eps;
            let fd = (eval(&m0, &plus) - eval(&m0, &minus)) / (2.0 * eps);
            assert!((grads.of(x)[j] - fd).abs() < 1e-8, "dx[{j}]");
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        fd_check(
            &[v(&[0.2, -0.8, 0.5]), v(&[1.1, 0.4, -0.3]), v(&[0.7, -0.6, 0.9])],
            |tape, ids| {
                let s = tape.sigmoid(ids[0]);
                let t = tape.tanh(ids[1]);
                let m = tape.mul(s, t);
                let a = tape.add(m, ids[2]);
                let sc = tape.scale(a, 0.7);
                tape.dot(sc, sc)
            },
        );
    }

    #[test]
    fn grad_softmax_and_logsoftmax() {
        fd_check(&[v(&[0.3, -0.4, 1.2, 0.1]), v(&[0.5, 1.0, -0.7, 0.2])], |tape, ids| {
            let sm = tape.softmax(ids[0]);
            let probe = tape.dot(sm, ids[1]);
            let lsm = tape.log_softmax(ids[0], None);
            let nll = tape.pick_neg_log(lsm, 2);
            tape.add(probe, nll)
        });
    }

    #[test]
    fn grad_masked_logsoftmax() {
        let mask = [true, false, true, true];
        fd_check(&[v(&[0.3, -0.4, 1.2, 0.1])], |tape, ids| {
            let lsm = tape.log_softmax(ids[0], Some(&mask));
            tape.pick_neg_log(lsm, 3)
        });
    }

    #[test]
    fn grad_weighted_sum_and_slice() {
        fd_check(
            &[
                v(&[0.2, 0.5, 0.3]),
                v(&[1.0, -1.0, 0.5, 0.2]),
                v(&[0.3, 0.8, -0.2, 0.1]),
                v(&[-0.6, 0.4, 0.9, -0.5]),
            ],
            |tape, ids| {
                let w = tape.softmax(ids[0]);
                let ctx = tape.weighted_sum(w, &ids[1..4]);
                let head = tape.slice(ctx, 1, 2);
                tape.dot(head, head)
            },
        );
    }

    #[test]
    fn grad_row_and_matrix_leaf() {
        let m = Tensor::matrix(3, 2, vec![0.1, -0.2, 0.4, 0.7, -0.5, 0.3]);
        let mut tape = Tape::new();
        let mid = tape.leaf_tensor(&m);
        let r = tape.row(mid, 1);
        let loss = tape.dot(r, r);
        let grads = tape.backward(loss);
        let gm = grads.of(mid);
        // d/dM[1,c] (M[1,0]^2 + M[1,1]^2) = 2 M[1,c]; rows 0 and 2 untouched
        assert_eq!(gm[0], 0.0);
        assert!((gm[2] - 2.0 * 0.4).abs() < 1e-12);
        assert!((gm[3] - 2.0 * 0.7).abs() < 1e-12);
        assert_eq!(gm[5], 0.0);
    }

    #[test]
    fn masked_logsoftmax_renormalizes() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(&[1.0, 2.0, 3.0, 0.5]);
        let mask = [true, false, true, false];
        let out = tape.log_softmax(x, Some(&mask));
        let vals = tape.value(out);
        assert_eq!(vals[1], f64::NEG_INFINITY);
        assert_eq!(vals[3], f64::NEG_INFINITY);
        let p: f64 = vals.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_and_mul_const_backward() {
        fd_check(&[v(&[0.4, -0.9]), v(&[0.1, 0.6])], |tape, ids| {
            let masked = tape.mul_const(ids[0], vec![0.0, 2.0]);
            let total = tape.sum(&[masked, ids[1], ids[1]]);
            tape.dot(total, total)
        });
    }
}
