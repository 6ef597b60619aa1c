//! Define-by-run reverse-mode differentiation over dense 2-D tensors.
//!
//! Every operation appends a node to the [`Tape`]; a node's parents always
//! have smaller indices, so a single reverse sweep visits records in a valid
//! topological order. Nodes that cannot reach a gradient-enabled leaf are
//! skipped during the sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::special::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};
use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{DecodeError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
    Sin,
    Cos,
    Digamma,
    Lgamma,
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
    SliceFlat(usize, usize),
    RepeatRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    PickCols(usize, Vec<usize>),
    Unary(Unary, usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// dLoss/dVar; zeros when the node is unreachable from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(r, c, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; r * c])
    }
}

fn bcast_index(rows: usize, cols: usize, r: usize, c: usize) -> usize {
    (if rows == 1 { 0 } else { r }) * cols + if cols == 1 { 0 } else { c }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Gradient-enabled leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.val(v).item()
    }

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (ar, ac) = ta.shape();
        let (br, bc) = tb.shape();
        let rows = ar.max(br);
        let cols = ac.max(bc);
        let ok = |x: usize, m: usize| x == m || x == 1;
        if !(ok(ar, rows) && ok(br, rows) && ok(ac, cols) && ok(bc, cols)) {
            return Err(DecodeError::Shape {
                op: match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                    Binary::Div => "div",
                },
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = if (ar, ac) == (br, bc) {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    d.push(f(
                        ta.data()[bcast_index(ar, ac, r, c)],
                        tb.data()[bcast_index(br, bc, r, c)],
                    ));
                }
            }
            d
        };
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(rows, cols, data)?,
            Op::Binary(kind, a.0, b.0),
            needs,
        ))
    }

    /// Elementwise sum; either operand may broadcast along unit dimensions.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let t = self.val(a);
        let data = t.data().iter().map(|x| x * k).collect();
        let needs = self.needs(&[a.0]);
        self.push(
            Tensor::new(t.rows(), t.cols(), data).unwrap(),
            Op::Scale(a.0, k),
            needs,
        )
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let t = self.val(a);
        let data = t.data().iter().map(|x| x + k).collect();
        let needs = self.needs(&[a.0]);
        self.push(
            Tensor::new(t.rows(), t.cols(), data).unwrap(),
            Op::AddScalar(a.0),
            needs,
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(&self.val(b))?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), needs))
    }

    /// Column-wise concatenation of equally tall tensors.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.val(p)).collect();
        let rows = vals.first().map_or(0, |t| t.rows());
        for t in &vals {
            if t.rows() != rows {
                return Err(DecodeError::Shape {
                    op: "concat",
                    lhs: vals[0].shape(),
                    rhs: t.shape(),
                });
            }
        }
        let cols: usize = vals.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for t in &vals {
                data.extend_from_slice(t.row_slice(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::new(rows, cols, data)?, Op::ConcatCols(ids), needs))
    }

    /// Columns `start..end`.
    pub fn slice(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.val(a);
        if start > end || end > t.cols() {
            return Err(DecodeError::Shape {
                op: "slice",
                lhs: t.shape(),
                rhs: (start, end),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(
            Tensor::new(t.rows(), w, data)?,
            Op::SliceCols(a.0, start),
            needs,
        ))
    }

    /// Splits columns at the given widths.
    pub fn split(&self, a: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice(a, start, start + w)?);
            start += w;
        }
        if start != self.shape(a).1 {
            return Err(DecodeError::Shape {
                op: "split",
                lhs: self.shape(a),
                rhs: (1, start),
            });
        }
        Ok(out)
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = (*self.val(a)).clone().reshaped(rows, cols)?;
        let needs = self.needs(&[a.0]);
        Ok(self.push(t, Op::Reshape(a.0), needs))
    }

    /// Contiguous run of `rows * cols` elements starting at flat offset
    /// `start`, viewed as a `rows x cols` tensor.
    pub fn slice_flat(&self, a: Var, start: usize, rows: usize, cols: usize) -> Result<Var> {
        let t = self.val(a);
        let end = start + rows * cols;
        if end > t.len() {
            return Err(DecodeError::Shape {
                op: "slice_flat",
                lhs: t.shape(),
                rhs: (start, end),
            });
        }
        let data = t.data()[start..end].to_vec();
        let needs = self.needs(&[a.0]);
        Ok(self.push(
            Tensor::new(rows, cols, data)?,
            Op::SliceFlat(a.0, start),
            needs,
        ))
    }

    /// Repeats each row `times` consecutively.
    pub fn repeat_rows(&self, a: Var, times: usize) -> Var {
        let t = self.val(a);
        let mut data = Vec::with_capacity(t.len() * times);
        for r in 0..t.rows() {
            for _ in 0..times {
                data.extend_from_slice(t.row_slice(r));
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(
            Tensor::new(t.rows() * times, t.cols(), data).unwrap(),
            Op::RepeatRows(a.0, times),
            needs,
        )
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            if i >= t.rows() {
                return Err(DecodeError::Shape {
                    op: "gather_rows",
                    lhs: t.shape(),
                    rhs: (i, 0),
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(
            Tensor::new(idx.len(), t.cols(), data)?,
            Op::GatherRows(a.0, idx.to_vec()),
            needs,
        ))
    }

    /// Selects column `idx[r]` from row `r`, giving an `n x 1` tensor.
    pub fn pick(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(a);
        if idx.len() != t.rows() || idx.iter().any(|&c| c >= t.cols()) {
            return Err(DecodeError::Shape {
                op: "pick",
                lhs: t.shape(),
                rhs: (idx.len(), idx.iter().copied().max().unwrap_or(0)),
            });
        }
        let data = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let needs = self.needs(&[a.0]);
        Ok(self.push(
            Tensor::new(idx.len(), 1, data)?,
            Op::PickCols(a.0, idx.to_vec()),
            needs,
        ))
    }

    fn unary(&self, kind: Unary, a: Var) -> Var {
        let t = self.val(a);
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Relu => Box::new(|x: f64| x.max(0.0)),
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Square => Box::new(|x| x * x),
            Unary::Sqrt => Box::new(f64::sqrt),
            Unary::Sin => Box::new(f64::sin),
            Unary::Cos => Box::new(f64::cos),
            Unary::Digamma => Box::new(digamma_unchecked),
            Unary::Lgamma => Box::new(lgamma_unchecked),
            Unary::Clamp(lo, hi) => Box::new(move |x: f64| x.clamp(lo, hi)),
        };
        let data = t.data().iter().map(|&x| f(x)).collect();
        let needs = self.needs(&[a.0]);
        self.push(
            Tensor::new(t.rows(), t.cols(), data).unwrap(),
            Op::Unary(kind, a.0),
            needs,
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn relu(&self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn square(&self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn sin(&self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    fn check_positive(&self, a: Var, func: &'static str) -> Result<()> {
        let t = self.val(a);
        match t.data().iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
            Some(&bad) => Err(DecodeError::Domain { func, value: bad }),
            None => Ok(()),
        }
    }

    pub fn digamma(&self, a: Var) -> Result<Var> {
        self.check_positive(a, "digamma")?;
        Ok(self.unary(Unary::Digamma, a))
    }

    pub fn lgamma(&self, a: Var) -> Result<Var> {
        self.check_positive(a, "lgamma")?;
        Ok(self.unary(Unary::Lgamma, a))
    }

    /// Row-wise softmax.
    pub fn softmax(&self, a: Var) -> Var {
        let t = self.val(a);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - m).exp();
                z += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= z;
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(
            Tensor::new(t.rows(), t.cols(), data).unwrap(),
            Op::SoftmaxRows(a.0),
            needs,
        )
    }

    /// Row-wise log-sum-exp, giving an `n x 1` tensor.
    pub fn log_sum_exp(&self, a: Var) -> Var {
        let t = self.val(a);
        let data = (0..t.rows())
            .map(|r| {
                let row = t.row_slice(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let needs = self.needs(&[a.0]);
        self.push(
            Tensor::new(t.rows(), 1, data).unwrap(),
            Op::LogSumExpRows(a.0),
            needs,
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        let needs = self.needs(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), needs)
    }

    /// Per-row sums, `n x 1`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let t = self.val(a);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let needs = self.needs(&[a.0]);
        self.push(
            Tensor::new(t.rows(), 1, data).unwrap(),
            Op::SumRows(a.0),
            needs,
        )
    }

    /// Per-column sums, `1 x m`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let t = self.val(a);
        let mut data = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (d, x) in data.iter_mut().zip(t.row_slice(r)) {
                *d += x;
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(Tensor::row(data), Op::SumCols(a.0), needs)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.val(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.shape()).collect();
        if shapes[loss.0] != (1, 1) {
            return Err(DecodeError::Shape {
                op: "backward (loss must be scalar)",
                lhs: shapes[loss.0],
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            nodes: &[Node],
            id: usize,
        ) -> Option<&'g mut Vec<f64>> {
            if !nodes[id].needs_grad {
                return None;
            }
            let len = nodes[id].value.len();
            Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Binary(kind, a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (rows, cols) = out.shape();
                    let (ar, ac) = ta.shape();
                    let (br, bc) = tb.shape();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for r in 0..rows {
                            for c in 0..cols {
                                let k = r * cols + c;
                                let ia = bcast_index(ar, ac, r, c);
                                let yb = tb.data()[bcast_index(br, bc, r, c)];
                                ga[ia] += match kind {
                                    Binary::Add | Binary::Sub => g[k],
                                    Binary::Mul => g[k] * yb,
                                    Binary::Div => g[k] / yb,
                                };
                            }
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        for r in 0..rows {
                            for c in 0..cols {
                                let k = r * cols + c;
                                let ib = bcast_index(br, bc, r, c);
                                let xa = ta.data()[bcast_index(ar, ac, r, c)];
                                let yb = tb.data()[ib];
                                gb[ib] += match kind {
                                    Binary::Add => g[k],
                                    Binary::Sub => -g[k],
                                    Binary::Mul => g[k] * xa,
                                    Binary::Div => -g[k] * xa / (yb * yb),
                                };
                            }
                        }
                    }
                }
                Op::Scale(a, k) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for (d, x) in ga.iter_mut().zip(&g) {
                            *d += k * x;
                        }
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for (d, x) in ga.iter_mut().zip(&g) {
                            *d += x;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[*a].value.shape();
                    let n = nodes[*b].value.cols();
                    let av = Rc::clone(&nodes[*a].value);
                    let bv = Rc::clone(&nodes[*b].value);
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        matmul_bt_into(&g, bv.data(), ga, m, k, n);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        matmul_at_into(av.data(), &g, gb, m, k, n);
                    }
                }
                Op::ConcatCols(ids) => {
                    let (rows, cols) = out.shape();
                    let mut offset = 0;
                    for &p in ids {
                        let pc = nodes[p].value.cols();
                        if let Some(gp) = acc(&mut grads, &nodes, p) {
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + pc];
                                for (d, x) in gp[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                    *d += x;
                                }
                            }
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, w) = out.shape();
                    let pc = nodes[*a].value.cols();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for r in 0..rows {
                            for c in 0..w {
                                ga[r * pc + start + c] += g[r * w + c];
                            }
                        }
                    }
                }
                Op::SliceFlat(a, start) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for (d, x) in ga[*start..*start + g.len()].iter_mut().zip(&g) {
                            *d += x;
                        }
                    }
                }
                Op::RepeatRows(a, times) => {
                    let cols = out.cols();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for (r, chunk) in g.chunks(cols).enumerate() {
                            let dst = &mut ga[(r / times) * cols..(r / times + 1) * cols];
                            for (d, x) in dst.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let cols = out.cols();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for (r, &src) in idx.iter().enumerate() {
                            for c in 0..cols {
                                ga[src * cols + c] += g[r * cols + c];
                            }
                        }
                    }
                }
                Op::PickCols(a, idx) => {
                    let pc = nodes[*a].value.cols();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for (r, &c) in idx.iter().enumerate() {
                            ga[r * pc + c] += g[r];
                        }
                    }
                }
                Op::Unary(kind, a) => {
                    let x = Rc::clone(&nodes[*a].value);
                    let y = Rc::clone(out);
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for k in 0..g.len() {
                            let (xv, yv) = (x.data()[k], y.data()[k]);
                            let local = match kind {
                                Unary::Tanh => 1.0 - yv * yv,
                                Unary::Relu => {
                                    if xv > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Exp => yv,
                                Unary::Log => 1.0 / xv,
                                Unary::Square => 2.0 * xv,
                                Unary::Sqrt => 0.5 / yv,
                                Unary::Sin => xv.cos(),
                                Unary::Cos => -xv.sin(),
                                Unary::Digamma => trigamma_unchecked(xv),
                                Unary::Lgamma => digamma_unchecked(xv),
                                Unary::Clamp(lo, hi) => {
                                    if xv >= *lo && xv <= *hi {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                            ga[k] += g[k] * local;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = Rc::clone(out);
                    let cols = y.cols();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for r in 0..y.rows() {
                            let yr = y.row_slice(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for c in 0..cols {
                                ga[r * cols + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                Op::LogSumExpRows(a) => {
                    let x = Rc::clone(&nodes[*a].value);
                    let y = Rc::clone(out);
                    let cols = x.cols();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for r in 0..x.rows() {
                            let lse = y.data()[r];
                            for c in 0..cols {
                                ga[r * cols + c] += g[r] * (x.get(r, c) - lse).exp();
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for d in ga.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::SumRows(a) => {
                    let cols = nodes[*a].value.cols();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for (k, d) in ga.iter_mut().enumerate() {
                            *d += g[k / cols];
                        }
                    }
                }
                Op::SumCols(a) => {
                    let cols = nodes[*a].value.cols();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for (k, d) in ga.iter_mut().enumerate() {
                            *d += g[k % cols];
                        }
                    }
                }
            }
        }
        // Intermediate gradients are dropped as they are consumed; only leaves
        // keep theirs.
        Ok(Gradients { grads, shapes })
    }
}
