//! Recorded computation graph with reverse-mode gradient replay.

use std::rc::Rc;

use super::{half_power, half_power_deriv, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Primitive operations. Input references are indices of earlier records,
/// so the record list is topologically ordered by construction.
#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    /// `a @ b`, or `a @ b^T` when `trans_b` is set.
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// Row-broadcast add: `[B x n] + [n]`.
    AddBias { a: usize, bias: usize },
    Scale { a: usize, factor: f64 },
    Relu { a: usize },
    Square { a: usize },
    Sqrt { a: usize },
    /// Elementwise `(t^2 + eps)^(1/4)`.
    HalfPower { a: usize, eps: f64 },
    Sum { a: usize },
    /// Sum over the last axis of a rank-2 tensor.
    RowSum { a: usize },
    Mean { a: usize },
    /// Numerically stable `log(sum(exp(row)))` per row.
    LogSumExpRows { a: usize },
    /// `out[b, :] = a[idx[b], :]`.
    GatherRows { a: usize, idx: Rc<[usize]> },
    /// `out[i] = a[i, idx[i]]`.
    GatherLabel { a: usize, idx: Rc<[usize]> },
}

struct Record {
    op: Op,
    value: Tensor,
}

/// Tape of primitive-op records. One forward pass builds the tape; one
/// backward pass visits every record exactly once, in reverse.
#[derive(Default)]
pub struct Graph {
    records: Vec<Record>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of leaf records currently on the tape.
    pub fn leaf_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(r.op, Op::Leaf { .. }))
            .count()
    }

    /// Registers a tensor as a leaf, copying its value onto the tape.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf {
                requires_grad: t.requires_grad,
            },
            t.clone(),
        )
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(
            Op::Leaf {
                requires_grad: false,
            },
            t,
        )
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.records.push(Record { op, value });
        Var(self.records.len() - 1)
    }

    fn binary_shapes(&self, a: Var, b: Var, name: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{name}: operand shapes differ"
        );
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 2, "matmul: lhs must be rank 2");
        assert_eq!(tb.shape().len(), 2, "matmul: rhs must be rank 2");
        let (m, k) = (ta.rows(), ta.cols());
        let (bn, bk) = if trans_b {
            (tb.rows(), tb.cols())
        } else {
            (tb.cols(), tb.rows())
        };
        assert_eq!(k, bk, "matmul: inner dimensions differ");
        let mut out = vec![0.0; m * bn];
        for i in 0..m {
            for j in 0..bn {
                let mut s = 0.0;
                for p in 0..k {
                    let bv = if trans_b {
                        tb.data()[j * k + p]
                    } else {
                        tb.data()[p * bn + j]
                    };
                    s += ta.data()[i * k + p] * bv;
                }
                out[i * bn + j] = s;
            }
        }
        self.push(
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            Tensor::from_vec(vec![m, bn], out),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes(a, b, "add");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Add { a: a.0, b: b.0 }, Tensor::from_vec(shape, data))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes(a, b, "sub");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Sub { a: a.0, b: b.0 }, Tensor::from_vec(shape, data))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes(a, b, "mul");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Mul { a: a.0, b: b.0 }, Tensor::from_vec(shape, data))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        assert_eq!(ta.shape().len(), 2, "add_bias: lhs must be rank 2");
        assert_eq!(tb.shape().len(), 1, "add_bias: bias must be rank 1");
        assert_eq!(ta.cols(), tb.len(), "add_bias: width mismatch");
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] += tb.data()[j];
            }
        }
        self.push(
            Op::AddBias { a: a.0, bias: bias.0 },
            Tensor::from_vec(vec![rows, cols], data),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Scale { a: a.0, factor }, Tensor::from_vec(shape, data))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Relu { a: a.0 }, Tensor::from_vec(shape, data))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * x).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Square { a: a.0 }, Tensor::from_vec(shape, data))
    }

    /// Elementwise square root. Inputs must be non-negative; the derivative
    /// is unbounded near 0, so gradients are only meaningful away from it.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(
            t.data().iter().all(|x| *x >= 0.0),
            "sqrt: negative input"
        );
        let data = t.data().iter().map(|x| x.sqrt()).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Sqrt { a: a.0 }, Tensor::from_vec(shape, data))
    }

    pub fn half_power(&mut self, a: Var, eps: f64) -> Var {
        assert!(eps >= 0.0, "half_power: eps must be non-negative");
        let t = self.value(a);
        let data = t.data().iter().map(|x| half_power(*x, eps)).collect();
        let shape = t.shape().to_vec();
        self.push(Op::HalfPower { a: a.0, eps }, Tensor::from_vec(shape, data))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum { a: a.0 }, Tensor::scalar(s))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "row_sum: input must be rank 2");
        let data = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let rows = t.rows();
        self.push(Op::RowSum { a: a.0 }, Tensor::from_vec(vec![rows], data))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean: empty input");
        let s: f64 = t.data().iter().sum();
        let n = t.len() as f64;
        self.push(Op::Mean { a: a.0 }, Tensor::scalar(s / n))
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "log_sum_exp_rows: input must be rank 2");
        let data = (0..t.rows())
            .map(|i| {
                let row = t.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let rows = t.rows();
        self.push(
            Op::LogSumExpRows { a: a.0 },
            Tensor::from_vec(vec![rows], data),
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "gather_rows: input must be rank 2");
        assert!(
            idx.iter().all(|i| *i < t.rows()),
            "gather_rows: index out of range"
        );
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let shape = vec![idx.len(), cols];
        self.push(
            Op::GatherRows {
                a: a.0,
                idx: idx.into(),
            },
            Tensor::from_vec(shape, data),
        )
    }

    pub fn gather_label(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "gather_label: input must be rank 2");
        assert_eq!(t.rows(), idx.len(), "gather_label: one index per row");
        assert!(
            idx.iter().all(|i| *i < t.cols()),
            "gather_label: index out of range"
        );
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| t.row(i)[j])
            .collect();
        let rows = t.rows();
        self.push(
            Op::GatherLabel {
                a: a.0,
                idx: idx.into(),
            },
            Tensor::from_vec(vec![rows], data),
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Gradients of a scalar loss with respect to the given leaves.
    ///
    /// Leaves that do not influence the loss get zero gradients.
    pub fn grad(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "grad: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let adjoints = self.backward(loss);
        Ok(leaves
            .iter()
            .map(|v| {
                let shape = self.value(*v).shape().to_vec();
                let tracked = match self.records[v.0].op {
                    Op::Leaf { requires_grad } => requires_grad,
                    _ => true,
                };
                match &adjoints[v.0] {
                    Some(g) if tracked => Tensor::from_vec(shape, g.clone()),
                    _ => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn backward(&self, loss: Var) -> Vec<Option<Vec<f64>>> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.records.len()];
        adj[loss.0] = Some(vec![1.0]);
        let mut visited = 0usize;

        for k in (0..=loss.0).rev() {
            visited += 1;
            let Some(out_adj) = adj[k].clone() else {
                continue;
            };
            let rec = &self.records[k];
            match &rec.op {
                Op::Leaf { .. } => continue,
                Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (&self.records[*a].value, &self.records[*b].value);
                    let (m, kk) = (ta.rows(), ta.cols());
                    let n = rec.value.cols();
                    let ga = ensure(&mut adj, *a, ta.len());
                    if *trans_b {
                        // d a[i,p] += d c[i,j] * b[j,p]
                        for i in 0..m {
                            for j in 0..n {
                                let g = out_adj[i * n + j];
                                for p in 0..kk {
                                    ga[i * kk + p] += g * tb.data()[j * kk + p];
                                }
                            }
                        }
                        let ta = ta.clone();
                        let gb = ensure(&mut adj, *b, tb.len());
                        // d b[j,p] += d c[i,j] * a[i,p]
                        for i in 0..m {
                            for j in 0..n {
                                let g = out_adj[i * n + j];
                                for p in 0..kk {
                                    gb[j * kk + p] += g * ta.data()[i * kk + p];
                                }
                            }
                        }
                    } else {
                        // c = a @ b with b: [k x n]
                        for i in 0..m {
                            for p in 0..kk {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += out_adj[i * n + j] * tb.data()[p * n + j];
                                }
                                ga[i * kk + p] += s;
                            }
                        }
                        let ta = ta.clone();
                        let gb = ensure(&mut adj, *b, tb.len());
                        for p in 0..kk {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += ta.data()[i * kk + p] * out_adj[i * n + j];
                                }
                                gb[p * n + j] += s;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    accum(&mut adj, *a, &out_adj, |g| g);
                    accum(&mut adj, *b, &out_adj, |g| g);
                }
                Op::Sub { a, b } => {
                    accum(&mut adj, *a, &out_adj, |g| g);
                    accum(&mut adj, *b, &out_adj, |g| -g);
                }
                Op::Mul { a, b } => {
                    let (da, db): (Vec<f64>, Vec<f64>) = {
                        let (ta, tb) = (&self.records[*a].value, &self.records[*b].value);
                        (
                            out_adj.iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
                            out_adj.iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                        )
                    };
                    accum_vec(&mut adj, *a, &da);
                    accum_vec(&mut adj, *b, &db);
                }
                Op::AddBias { a, bias } => {
                    accum(&mut adj, *a, &out_adj, |g| g);
                    let cols = self.records[*bias].value.len();
                    let rows = out_adj.len() / cols;
                    let gb = ensure(&mut adj, *bias, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[j] += out_adj[i * cols + j];
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    let f = *factor;
                    accum(&mut adj, *a, &out_adj, |g| g * f);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = self.records[*a]
                        .value
                        .data()
                        .iter()
                        .zip(&out_adj)
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accum_vec(&mut adj, *a, &da);
                }
                Op::Square { a } => {
                    let da: Vec<f64> = self.records[*a]
                        .value
                        .data()
                        .iter()
                        .zip(&out_adj)
                        .map(|(x, g)| 2.0 * x * g)
                        .collect();
                    accum_vec(&mut adj, *a, &da);
                }
                Op::Sqrt { a } => {
                    // d sqrt(x) = 1 / (2 sqrt(x)); reads the stored output
                    let da: Vec<f64> = rec
                        .value
                        .data()
                        .iter()
                        .zip(&out_adj)
                        .map(|(y, g)| g / (2.0 * y))
                        .collect();
                    accum_vec(&mut adj, *a, &da);
                }
                Op::HalfPower { a, eps } => {
                    let da: Vec<f64> = self.records[*a]
                        .value
                        .data()
                        .iter()
                        .zip(&out_adj)
                        .map(|(x, g)| g * half_power_deriv(*x, *eps))
                        .collect();
                    accum_vec(&mut adj, *a, &da);
                }
                Op::Sum { a } => {
                    let g = out_adj[0];
                    let n = self.records[*a].value.len();
                    let ga = ensure(&mut adj, *a, n);
                    for v in ga.iter_mut() {
                        *v += g;
                    }
                }
                Op::RowSum { a } => {
                    let t = &self.records[*a].value;
                    let (rows, cols) = (t.rows(), t.cols());
                    let ga = ensure(&mut adj, *a, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += out_adj[i];
                        }
                    }
                }
                Op::Mean { a } => {
                    let n = self.records[*a].value.len();
                    let g = out_adj[0] / n as f64;
                    let ga = ensure(&mut adj, *a, n);
                    for v in ga.iter_mut() {
                        *v += g;
                    }
                }
                Op::LogSumExpRows { a } => {
                    // d lse_i / d z_ij = softmax(z_i)_j, recovered from the
                    // stored row results: softmax = exp(z - lse).
                    let t = &self.records[*a].value;
                    let (rows, cols) = (t.rows(), t.cols());
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let lse = rec.value.data()[i];
                        for j in 0..cols {
                            da[i * cols + j] = out_adj[i] * (t.row(i)[j] - lse).exp();
                        }
                    }
                    accum_vec(&mut adj, *a, &da);
                }
                Op::GatherRows { a, idx } => {
                    let t = &self.records[*a].value;
                    let cols = t.cols();
                    let ga = ensure(&mut adj, *a, t.len());
                    for (b, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[i * cols + j] += out_adj[b * cols + j];
                        }
                    }
                }
                Op::GatherLabel { a, idx } => {
                    let t = &self.records[*a].value;
                    let cols = t.cols();
                    let ga = ensure(&mut adj, *a, t.len());
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * cols + j] += out_adj[i];
                    }
                }
            }
        }
        debug_assert_eq!(visited, loss.0 + 1, "backward must visit each record once");
        adj
    }
}

fn ensure(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    adj[i].get_or_insert_with(|| vec![0.0; len])
}

fn accum(adj: &mut [Option<Vec<f64>>], i: usize, out_adj: &[f64], f: impl Fn(f64) -> f64) {
    let ga = adj[i].get_or_insert_with(|| vec![0.0; out_adj.len()]);
    for (v, g) in ga.iter_mut().zip(out_adj) {
        *v += f(*g);
    }
}

fn accum_vec(adj: &mut [Option<Vec<f64>>], i: usize, da: &[f64]) {
    let ga = adj[i].get_or_insert_with(|| vec![0.0; da.len()]);
    for (v, g) in ga.iter_mut().zip(da) {
        *v += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_of_variable() {
        // f(x) = x * x at x = 3 -> df/dx = 6
        let x = Tensor::scalar(3.0).with_grad();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.mul(xv, xv);
        let grads = g.grad(y, &[xv]).unwrap();
        assert_relative_eq!(grads[0].item(), 6.0, max_relative = 1e-12);
    }

    #[test]
    fn product_of_two_variables() {
        let x = Tensor::scalar(2.0).with_grad();
        let y = Tensor::scalar(5.0).with_grad();
        let mut g = Graph::new();
        let (xv, yv) = (g.leaf(&x), g.leaf(&y));
        let f = g.mul(xv, yv);
        let grads = g.grad(f, &[xv, yv]).unwrap();
        assert_relative_eq!(grads[0].item(), 5.0);
        assert_relative_eq!(grads[1].item(), 2.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let x = Tensor::scalar(1.0).with_grad();
        let z = Tensor::from_vec(vec![2], vec![1.0, 2.0]).with_grad();
        let mut g = Graph::new();
        let (xv, zv) = (g.leaf(&x), g.leaf(&z));
        let y = g.mul(xv, xv);
        let grads = g.grad(y, &[zv]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).with_grad();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.square(xv);
        assert!(g.grad(y, &[xv]).is_err());
    }

    #[test]
    fn matmul_forward_values() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(av, bv);
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);

        // a @ b^T with b stored transposed gives the same result
        let bt = Tensor::from_vec(vec![2, 3], vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        let btv = g.leaf(&bt);
        let c2 = g.matmul_nt(av, btv);
        assert_eq!(g.value(c2).data(), g.value(c).data());
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_inputs() {
        let z = Tensor::from_vec(vec![1, 3], vec![1000.0, 1000.0, 1000.0]);
        let mut g = Graph::new();
        let zv = g.leaf(&z);
        let l = g.log_sum_exp_rows(zv);
        assert_relative_eq!(g.value(l).data()[0], 1000.0 + 3f64.ln(), max_relative = 1e-12);
        assert!(g.value(l).is_finite());
    }

    #[test]
    fn gather_ops_route_gradients() {
        let c = Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad();
        let mut g = Graph::new();
        let cv = g.leaf(&c);
        let picked = g.gather_rows(cv, &[2, 0, 2]);
        let s = g.sum(picked);
        let grads = g.grad(s, &[cv]).unwrap();
        // row 2 picked twice, row 0 once, row 1 never
        assert_eq!(grads[0].data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
