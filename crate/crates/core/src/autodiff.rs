//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive op as a node holding its output value.
//! [`Tape::grad`] walks the nodes in exact reverse order of creation and
//! accumulates adjoints into the parameter leaves. A fresh tape is built for
//! every forward pass; parameters enter it through [`Tape::param`].
//!
//! Ops never panic on non-finite results. The first op that produces a NaN
//! or infinity is remembered and [`Tape::grad`] refuses to run past it.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default lower bound for the argument of [`Var::log`].
pub const LOG_FLOOR: f64 = 1e-300;

/// Index of a parameter inside a [`crate::params::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulConst(usize, Tensor),
    CenterRows(usize),
    ColumnMeans(usize),
    Exp(usize),
    Log(usize, f64),
    Pow(usize, f64),
    Relu(usize),
    Sum(usize),
    SumRows(usize),
    LogSumExpRows(usize, Option<Vec<bool>>),
    Pick(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    RowNorms(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::CenterRows(_) => "center_rows",
            Op::ColumnMeans(_) => "column_means",
            Op::Exp(_) => "exp",
            Op::Log(..) => "log",
            Op::Pow(..) => "pow",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::LogSumExpRows(..) => "log_sum_exp_rows",
            Op::Pick(..) => "pick",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::RowNorms(_) => "row_norms",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    floored_logs: Cell<usize>,
    fault: RefCell<Option<String>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of one scalar with respect to the parameters on its tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Gradient for `id`, or zeros of `shape` when the parameter never
    /// entered the tape.
    pub fn get_or_zeros(&self, id: ParamId, shape: [usize; 2]) -> Tensor {
        self.by_param
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.by_param.iter()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of [`Var::log`] evaluations whose argument hit the floor.
    pub fn floored_logs(&self) -> usize {
        self.floored_logs.get()
    }

    /// Description of the first op that produced a non-finite value.
    pub fn fault(&self) -> Option<String> {
        self.fault.borrow().clone()
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant)
    }

    pub fn param(&self, id: ParamId, value: Tensor) -> Var<'_> {
        self.push(value, Op::Param(id))
    }

    pub fn concat_cols(&self, parts: &[Var<'_>]) -> Var<'_> {
        let rows = parts[0].shape()[0];
        let nodes = self.nodes.borrow();
        let total: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        drop(nodes);
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.all_finite() {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some(format!("op `{}` (node {id}) produced a non-finite value", op.name()));
            }
        }
        nodes.push(Node { value, op });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Backpropagates from a `1×1` loss.
    pub fn grad(&self, loss: Var<'_>) -> Result<Gradients> {
        let shape = loss.shape();
        if shape != [1, 1] {
            return Err(Error::NotScalar(shape[0], shape[1]));
        }
        if let Some(fault) = self.fault() {
            return Err(Error::NonFinite(fault));
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        adj.resize_with(loss.id + 1, || None);
        adj[loss.id] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if let Op::Param(pid) = node.op {
                let g = adj[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                match out.by_param.get_mut(&pid) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert(pid, g);
                    }
                }
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut adj);
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut adj[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Constant | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            accumulate(adj, *a, g.matmul_t(val(*b)));
            accumulate(adj, *b, val(*a).t_matmul(g));
        }
        Op::MatMulT(a, b) => {
            accumulate(adj, *a, g.matmul(val(*b)));
            accumulate(adj, *b, g.t_matmul(val(*a)));
        }
        Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *b, g.scaled(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(adj, *a, g.zip_map(val(*b), |x, y| x * y));
            accumulate(adj, *b, g.zip_map(val(*a), |x, y| x * y));
        }
        Op::AddRow(a, row) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *row, g.column_means().scaled(g.rows() as f64));
        }
        Op::AddCol(a, col) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *col, row_sums(g));
        }
        Op::MulCol(a, col) => {
            let av = val(*a);
            let cv = val(*col);
            let cols = g.cols();
            let mut ga = g.clone();
            let mut gc = Tensor::zeros(g.rows(), 1);
            for (i, v) in ga.data.iter_mut().enumerate() {
                let r = i / cols;
                gc.data[r] += *v * av.data[i];
                *v *= cv.data[r];
            }
            accumulate(adj, *a, ga);
            accumulate(adj, *col, gc);
        }
        Op::Scale(a, c) => accumulate(adj, *a, g.scaled(*c)),
        Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
        Op::MulConst(a, k) => accumulate(adj, *a, g.zip_map(k, |x, y| x * y)),
        Op::CenterRows(a) => {
            if g.rows() <= 1 {
                accumulate(adj, *a, g.clone());
            } else {
                accumulate(adj, *a, g.sub_row(&g.column_means()));
            }
        }
        Op::ColumnMeans(a) => {
            let n = val(*a).rows();
            let cols = g.cols();
            let mut ga = Tensor::zeros(n, cols);
            for (i, v) in ga.data.iter_mut().enumerate() {
                *v = g.data[i % cols] / n as f64;
            }
            accumulate(adj, *a, ga);
        }
        Op::Exp(a) => accumulate(adj, *a, g.zip_map(&node.value, |x, y| x * y)),
        Op::Log(a, floor) => {
            let floor = *floor;
            accumulate(
                adj,
                *a,
                g.zip_map(val(*a), |d, x| if x >= floor { d / x } else { 0.0 }),
            );
        }
        Op::Pow(a, p) => {
            let p = *p;
            accumulate(
                adj,
                *a,
                g.zip_map(val(*a), |d, x| {
                    if x == 0.0 {
                        // one-sided: x^p is flat at zero for p > 1, kinked for p == 1
                        if p == 1.0 {
                            d
                        } else {
                            0.0
                        }
                    } else {
                        d * p * x.powf(p - 1.0)
                    }
                }),
            );
        }
        Op::Relu(a) => accumulate(
            adj,
            *a,
            g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
        ),
        Op::Sum(a) => {
            let s = val(*a).shape;
            accumulate(adj, *a, Tensor::filled(s[0], s[1], g.data[0]));
        }
        Op::SumRows(a) => {
            let s = val(*a).shape;
            let mut ga = Tensor::zeros(s[0], s[1]);
            for (i, v) in ga.data.iter_mut().enumerate() {
                *v = g.data[i / s[1]];
            }
            accumulate(adj, *a, ga);
        }
        Op::LogSumExpRows(a, mask) => {
            let x = val(*a);
            let cols = x.cols();
            let mut ga = Tensor::zeros(x.rows(), cols);
            for (i, v) in ga.data.iter_mut().enumerate() {
                if mask.as_ref().is_some_and(|m| !m[i]) {
                    continue;
                }
                let r = i / cols;
                *v = g.data[r] * (x.data[i] - node.value.data[r]).exp();
            }
            accumulate(adj, *a, ga);
        }
        Op::Pick(a, idx) => {
            let s = val(*a).shape;
            let mut ga = Tensor::zeros(s[0], s[1]);
            for (r, &c) in idx.iter().enumerate() {
                ga.data[r * s[1] + c] += g.data[r];
            }
            accumulate(adj, *a, ga);
        }
        Op::GatherRows(a, idx) => {
            let s = val(*a).shape;
            let mut ga = Tensor::zeros(s[0], s[1]);
            for (r, &src) in idx.iter().enumerate() {
                for c in 0..s[1] {
                    ga.data[src * s[1] + c] += g.data[r * s[1] + c];
                }
            }
            accumulate(adj, *a, ga);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pc = val(p).cols();
                let mut gp = Tensor::zeros(g.rows(), pc);
                for r in 0..g.rows() {
                    for c in 0..pc {
                        gp.set(r, c, g.get(r, offset + c));
                    }
                }
                offset += pc;
                accumulate(adj, p, gp);
            }
        }
        Op::RowNorms(a) => {
            let x = val(*a);
            let cols = x.cols();
            let mut ga = Tensor::zeros(x.rows(), cols);
            for (i, v) in ga.data.iter_mut().enumerate() {
                let r = i / cols;
                let norm = node.value.data[r];
                if norm > 0.0 {
                    *v = g.data[r] * x.data[i] / norm;
                }
            }
            accumulate(adj, *a, ga);
        }
    }
}

fn row_sums(t: &Tensor) -> Tensor {
    let cols = t.cols();
    Tensor::column_vector(
        (0..t.rows())
            .map(|r| t.data[r * cols..(r + 1) * cols].iter().sum())
            .collect(),
    )
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    /// Value of a `1×1` node.
    pub fn item(&self) -> f64 {
        let v = self.tape.value_of(self.id);
        debug_assert!(v.is_scalar());
        v.data[0]
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.value_of(self.id).shape
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let out = f(&self.tape.value_of(self.id));
        self.tape.push(out, op)
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'t> {
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            f(&a, &b)
        };
        self.tape.push(out, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMulT(self.id, other.id), |a, b| a.matmul_t(b))
    }

    pub fn t(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            assert_eq!(a.shape, b.shape, "elementwise mul shape mismatch");
            a.zip_map(b, |x, y| x * y)
        })
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(row, Op::AddRow(self.id, row.id), |a, r| {
            assert_eq!(r.shape, [1, a.cols()], "add_row expects a 1x{} row", a.cols());
            let c = a.cols();
            let mut out = a.clone();
            for (i, v) in out.data.iter_mut().enumerate() {
                *v += r.data[i % c];
            }
            out
        })
    }

    /// Adds an `rows×1` column to every column.
    pub fn add_col(&self, col: Var<'t>) -> Var<'t> {
        self.binary(col, Op::AddCol(self.id, col.id), |a, k| {
            assert_eq!(k.shape, [a.rows(), 1], "add_col expects a {}x1 column", a.rows());
            let c = a.cols();
            let mut out = a.clone();
            for (i, v) in out.data.iter_mut().enumerate() {
                *v += k.data[i / c];
            }
            out
        })
    }

    /// Scales row `i` by `col[i]`.
    pub fn mul_col(&self, col: Var<'t>) -> Var<'t> {
        self.binary(col, Op::MulCol(self.id, col.id), |a, k| {
            assert_eq!(k.shape, [a.rows(), 1], "mul_col expects a {}x1 column", a.rows());
            let c = a.cols();
            let mut out = a.clone();
            for (i, v) in out.data.iter_mut().enumerate() {
                *v *= k.data[i / c];
            }
            out
        })
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a.scaled(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a.map(|v| v + c))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, k: Tensor) -> Var<'t> {
        let out = {
            let a = self.tape.value_of(self.id);
            assert_eq!(a.shape, k.shape, "mul_const shape mismatch");
            a.zip_map(&k, |x, y| x * y)
        };
        self.tape.push(out, Op::MulConst(self.id, k))
    }

    pub fn center_rows(&self) -> Var<'t> {
        self.unary(Op::CenterRows(self.id), crate::tensor::center_rows)
    }

    pub fn column_means(&self) -> Var<'t> {
        self.unary(Op::ColumnMeans(self.id), Tensor::column_means)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(&self) -> Var<'t> {
        self.log_floored(LOG_FLOOR)
    }

    pub fn log_floored(&self, floor: f64) -> Var<'t> {
        let tape = self.tape;
        self.unary(Op::Log(self.id, floor), |a| {
            a.map(|x| {
                if x < floor {
                    tape.floored_logs.set(tape.floored_logs.get() + 1);
                    floor.ln()
                } else {
                    x.ln()
                }
            })
        })
    }

    pub fn pow(&self, p: f64) -> Var<'t> {
        self.unary(Op::Pow(self.id, p), |a| a.map(|x| x.powf(p)))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|x| x.max(0.0)))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    /// Row sums as an `rows×1` column.
    pub fn sum_rows(&self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), row_sums)
    }

    /// Per-row `log Σ_j exp(x_ij)`, restricted to entries where `mask` is
    /// true (row-major, same length as the tensor).
    pub fn log_sum_exp_rows(&self, mask: Option<Vec<bool>>) -> Var<'t> {
        let out = {
            let a = self.tape.value_of(self.id);
            if let Some(m) = &mask {
                assert_eq!(m.len(), a.len(), "mask length mismatch");
            }
            let cols = a.cols();
            let mut out = Vec::with_capacity(a.rows());
            let mut buf = Vec::with_capacity(cols);
            for r in 0..a.rows() {
                buf.clear();
                for c in 0..cols {
                    let i = r * cols + c;
                    if mask.as_ref().is_none_or(|m| m[i]) {
                        buf.push(a.data[i]);
                    }
                }
                out.push(crate::tensor::log_sum_exp(&buf));
            }
            Tensor::column_vector(out)
        };
        self.tape.push(out, Op::LogSumExpRows(self.id, mask))
    }

    /// `out[r] = self[r, idx[r]]`, as an `rows×1` column.
    pub fn pick(&self, idx: &[usize]) -> Var<'t> {
        let out = {
            let a = self.tape.value_of(self.id);
            assert_eq!(idx.len(), a.rows(), "pick needs one index per row");
            Tensor::column_vector(idx.iter().enumerate().map(|(r, &c)| a.get(r, c)).collect())
        };
        self.tape.push(out, Op::Pick(self.id, idx.to_vec()))
    }

    /// Stacks `self[idx[0]], self[idx[1]], …`.
    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        let out = {
            let a = self.tape.value_of(self.id);
            let c = a.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &r in idx {
                data.extend_from_slice(a.row(r));
            }
            Tensor {
                shape: [idx.len(), c],
                data,
            }
        };
        self.tape.push(out, Op::GatherRows(self.id, idx.to_vec()))
    }

    /// Euclidean norm of every row, as an `rows×1` column.
    pub fn row_norms(&self) -> Var<'t> {
        self.unary(Op::RowNorms(self.id), |a| {
            Tensor::column_vector(
                (0..a.rows())
                    .map(|r| a.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect(),
            )
        })
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| {
            assert_eq!(a.shape, b.shape, "add shape mismatch");
            a.zip_map(b, |x, y| x + y)
        })
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| {
            assert_eq!(a.shape, b.shape, "sub shape mismatch");
            a.zip_map(b, |x, y| x - y)
        })
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(&self, rhs)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a>, x0: Tensor) {
        let tape = Tape::new();
        let x = tape.param(ParamId(0), x0.clone());
        let loss = build(&tape, x);
        let g = tape.grad(loss).unwrap();
        let g = g.get(ParamId(0)).unwrap();
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data[i] += delta;
                let t = Tape::new();
                let v = t.param(ParamId(0), xp);
                build(&t, v).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-3);
            assert!(err < 1e-6, "entry {i}: fd {fd} vs autodiff {}", g.data[i]);
        }
    }

    fn sample() -> Tensor {
        Tensor::from_rows(&[
            vec![0.3, -1.2, 0.8],
            vec![1.1, 0.4, -0.5],
            vec![-0.7, 0.9, 0.2],
        ])
    }

    #[test]
    fn sum_of_vector_has_unit_gradient() {
        let tape = Tape::new();
        let x = tape.param(ParamId(3), Tensor::row_vector(vec![1.0, -2.0, 5.0]));
        let g = tape.grad(x.sum()).unwrap();
        assert_eq!(g.get(ParamId(3)).unwrap().data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::row_vector(vec![1.0, 2.0]));
        let y = tape.param(ParamId(1), Tensor::row_vector(vec![3.0, 4.0]));
        let _ = y.scale(2.0);
        let g = tape.grad(x.sum()).unwrap();
        assert_eq!(g.get(ParamId(1)).unwrap(), &Tensor::zeros(1, 2));
        assert_eq!(g.get_or_zeros(ParamId(9), [2, 2]), Tensor::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::zeros(2, 2));
        assert!(matches!(tape.grad(x), Err(Error::NotScalar(2, 2))));
    }

    #[test]
    fn non_finite_values_block_backprop() {
        let tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::scalar(800.0));
        let y = x.exp().exp();
        assert!(tape.fault().is_some());
        assert!(matches!(tape.grad(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn log_floor_is_counted() {
        let tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::row_vector(vec![0.0, 1.0]));
        let l = x.log().sum();
        assert_eq!(tape.floored_logs(), 1);
        assert!(l.item().is_finite());
        let g = tape.grad(l).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let w = Tensor::from_rows(&[vec![0.5, -0.1], vec![0.2, 0.3], vec![-0.4, 0.9]]);
        fd_check(
            move |t, x| {
                let w = t.constant(w.clone());
                x.matmul(w).relu().matmul_t(x.t().t().matmul(w)).exp().sum()
            },
            sample(),
        );
    }

    #[test]
    fn centering_and_reductions_match_finite_differences() {
        fd_check(
            |t, x| {
                let c = x.center_rows();
                let m = x.column_means();
                let lse = c.log_sum_exp_rows(Some(vec![true, false, true, true, true, false, true, true, true]));
                let v = c.add_row(m).add_col(lse).pick(&[2, 0, 1]);
                let s = v.sum_rows().pow(2.0).sum();
                s + t.constant(Tensor::scalar(1.0)).mul(x.gather_rows(&[1, 1]).sum())
            },
            sample(),
        );
    }

    #[test]
    fn norms_and_concat_match_finite_differences() {
        fd_check(
            |t, x| {
                let n = x.row_norms().add_scalar(1e-12).pow(-1.0);
                let z = x.mul_col(n);
                let both = t.concat_cols(&[z, x.scale(0.5)]);
                let cmask = Tensor::filled(3, 6, 0.25);
                both.mul_const(cmask).add_scalar(2.0).log().add_col(-both.log_sum_exp_rows(None)).sum()
            },
            sample(),
        );
    }

    #[test]
    fn backward_visits_reverse_order() {
        // a reused node accumulates from both consumers before propagating
        let tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::scalar(3.0));
        let y = x * x;
        let z = y * x + y;
        let g = tape.grad(z).unwrap();
        // d/dx (x^3 + x^2) = 3x^2 + 2x
        assert_eq!(g.get(ParamId(0)).unwrap().data[0], 33.0);
    }
}
