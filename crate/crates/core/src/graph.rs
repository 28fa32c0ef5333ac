//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive in execution order, so node indices
//! are already a topological order. [`Graph::backward`] walks them once in
//! reverse, accumulating adjoints.
//!
//! The primitive set is deliberately closed: matrix product, transpose,
//! elementwise arithmetic, row/column broadcast-add, `relu`, `tanh`, `exp`,
//! `log`, `square`, reductions, log-sum-exp (optionally diagonal-masked),
//! row gathers, column concatenation, reshape and diagonal extraction.
//!
//! The first non-finite value produced by any primitive poisons the graph;
//! it is reported by [`Graph::check`] and by [`Graph::backward`].

use crate::error::{Error, Result};
use crate::tensor::{Axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a[n×m] + r[1×m]` on every row.
    AddRow(Var, Var),
    /// `a[n×m] + c[n×1]` on every column.
    AddCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var, Axis),
    Mean(Var, Axis),
    LogSumExp {
        input: Var,
        axis: Axis,
        skip_diagonal: bool,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    Reshape(Var),
    Diag(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LogSumExp { .. } => "logsumexp",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(_) => "reshape",
            Op::Diag(_) => "diag",
        }
    }

    fn inputs(&self) -> [Option<Var>; 2] {
        match self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::ConcatCols(a, b) => [Some(*a), Some(*b)],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Diag(a) => [Some(*a), None],
            Op::LogSumExp { input, .. } => [Some(*input), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether some leaf is upstream, i.e. whether an adjoint is useful.
    needs_grad: bool,
}

/// A single-threaded record of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<String>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Errors if any recorded value is non-finite.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(msg) => Err(Error::Numeric(msg.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].needs_grad);
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(format!(
                "non-finite output from `{}` at node {}",
                op.name(),
                self.nodes.len()
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a differentiable input, typically a parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// Adds an input that gradients are never taken against; its adjoint
    /// (and any branch fed only by constants) is skipped in the reverse sweep.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(
            rv.rows() == 1 && rv.cols() == av.cols(),
            "add_row: {:?} + {:?}",
            av.shape(),
            rv.shape()
        );
        let m = av.cols();
        let mut out = av.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += rv.data()[k % m];
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert!(
            cv.cols() == 1 && cv.rows() == av.rows(),
            "add_col: {:?} + {:?}",
            av.shape(),
            cv.shape()
        );
        let m = av.cols();
        let mut out = av.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += cv.data()[k / m];
        }
        self.push(out, Op::AddCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Var {
        let out = self.value(a).sum_axis(axis);
        self.push(out, Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let count = reduced_count(t, axis) as f64;
        let out = t.sum_axis(axis).map(|x| x / count);
        self.push(out, Op::Mean(a, axis))
    }

    /// Stable log-sum-exp along `axis`; panics on an empty reduction.
    pub fn logsumexp(&mut self, a: Var, axis: Axis) -> Var {
        self.masked_logsumexp(a, axis, false)
    }

    /// Log-sum-exp with the diagonal of a square input excluded.
    pub fn logsumexp_off_diagonal(&mut self, a: Var, axis: Axis) -> Var {
        self.masked_logsumexp(a, axis, true)
    }

    fn masked_logsumexp(&mut self, a: Var, axis: Axis, skip_diagonal: bool) -> Var {
        let out = self
            .value(a)
            .masked_logsumexp(axis, skip_diagonal)
            .unwrap_or_else(|e| panic!("logsumexp: {e}"));
        self.push(
            out,
            Op::LogSumExp {
                input: a,
                axis,
                skip_diagonal,
            },
        )
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let t = self.value(a);
        let m = t.cols();
        let mut out = Vec::with_capacity(indices.len() * m);
        for &i in &indices {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), m, out);
        self.push(out, Op::GatherRows(a, indices))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat_cols row count");
        let (n, ma, mb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let out = Tensor::matrix(n, ma + mb, out);
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape element count");
        let out = Tensor::matrix(rows, cols, t.data().to_vec());
        self.push(out, Op::Reshape(a))
    }

    /// Main diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), t.cols(), "diag of non-square matrix");
        let out = Tensor::column((0..t.rows()).map(|i| t.get(i, i)).collect());
        self.push(out, Op::Diag(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at node {idx} (`{}`)",
                        self.nodes[idx].op.name()
                    )));
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| (n.value.rows(), n.value.cols()))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.matmul_t(false, val(*b), true))
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(grads, *b, val(*a).matmul_t(true, g, false))
                }
            }
            Op::Transpose(a) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.transpose())
                }
            }
            Op::Add(a, b) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.clone())
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(grads, *b, g.clone())
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.clone())
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(grads, *b, g.map(|x| -x))
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y))
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y))
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.zip_map(bv, |x, y| x / y))
                }
                // d(a/b)/db = -(a/b)/b
                let gb = g.zip_map(out, |x, q| x * q).zip_map(bv, |x, y| -x / y);
                if self.nodes[b.0].needs_grad {
                    accumulate(grads, *b, gb)
                }
            }
            Op::AddRow(a, r) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.clone())
                }
                if self.nodes[r.0].needs_grad {
                    accumulate(grads, *r, g.sum_axis(Axis::Rows))
                }
            }
            Op::AddCol(a, c) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.clone())
                }
                if self.nodes[c.0].needs_grad {
                    accumulate(grads, *c, g.sum_axis(Axis::Cols))
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.map(|x| x * c))
                }
            }
            Op::AddScalar(a) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.clone())
                }
            }
            Op::Relu(a) => {
                let ga = g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, ga)
                }
            }
            Op::Tanh(a) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.zip_map(out, |x, t| x * (1.0 - t * t)))
                }
            }
            Op::Exp(a) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.zip_map(out, |x, e| x * e))
                }
            }
            Op::Log(a) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.zip_map(val(*a), |x, y| x / y))
                }
            }
            Op::Square(a) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y))
                }
            }
            Op::Sum(a, axis) => {
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, broadcast_back(g, val(*a), *axis, 1.0))
                }
            }
            Op::Mean(a, axis) => {
                let count = reduced_count(val(*a), *axis) as f64;
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, broadcast_back(g, val(*a), *axis, 1.0 / count))
                }
            }
            Op::LogSumExp {
                input,
                axis,
                skip_diagonal,
            } => {
                // d lse / d x_k = softmax weight of x_k within its reduction.
                let x = val(*input);
                let (n, m) = (x.rows(), x.cols());
                let mut gx = Tensor::zeros(n, m);
                for i in 0..n {
                    for j in 0..m {
                        if *skip_diagonal && i == j {
                            continue;
                        }
                        let (lse, gout) = match axis {
                            Axis::All => (out.item(), g.item()),
                            Axis::Rows => (out.get(0, j), g.get(0, j)),
                            Axis::Cols => (out.get(i, 0), g.get(i, 0)),
                        };
                        gx.set(i, j, gout * (x.get(i, j) - lse).exp());
                    }
                }
                if self.nodes[input.0].needs_grad {
                    accumulate(grads, *input, gx)
                }
            }
            Op::GatherRows(a, indices) => {
                let av = val(*a);
                let m = av.cols();
                let mut ga = Tensor::zeros(av.rows(), m);
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..m {
                        let cur = ga.get(i, c);
                        ga.set(i, c, cur + g.get(k, c));
                    }
                }
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, ga)
                }
            }
            Op::ConcatCols(a, b) => {
                let ma = val(*a).cols();
                let mb = val(*b).cols();
                let n = g.rows();
                let mut ga = Vec::with_capacity(n * ma);
                let mut gb = Vec::with_capacity(n * mb);
                for i in 0..n {
                    let row = g.row(i);
                    ga.extend_from_slice(&row[..ma]);
                    gb.extend_from_slice(&row[ma..]);
                }
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, Tensor::matrix(n, ma, ga))
                }
                if self.nodes[b.0].needs_grad {
                    accumulate(grads, *b, Tensor::matrix(n, mb, gb))
                }
            }
            Op::Reshape(a) => {
                let av = val(*a);
                accumulate(
                    grads,
                    *a,
                    Tensor::matrix(av.rows(), av.cols(), g.data().to_vec()),
                );
            }
            Op::Diag(a) => {
                let n = val(*a).rows();
                let mut ga = Tensor::zeros(n, n);
                for i in 0..n {
                    ga.set(i, i, g.get(i, 0));
                }
                if self.nodes[a.0].needs_grad {
                    accumulate(grads, *a, ga)
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduced_count(t: &Tensor, axis: Axis) -> usize {
    match axis {
        Axis::All => t.len(),
        Axis::Rows => t.rows(),
        Axis::Cols => t.cols(),
    }
}

/// Spreads a reduced adjoint back over the input shape, times `factor`.
fn broadcast_back(g: &Tensor, input: &Tensor, axis: Axis, factor: f64) -> Tensor {
    let (n, m) = (input.rows(), input.cols());
    let data = (0..n * m)
        .map(|k| {
            let (i, j) = (k / m, k % m);
            factor
                * match axis {
                    Axis::All => g.item(),
                    Axis::Rows => g.get(0, j),
                    Axis::Cols => g.get(i, 0),
                }
        })
        .collect();
    Tensor::matrix(n, m, data)
}
