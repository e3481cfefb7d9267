//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Tape::backward`] walks the record in reverse and accumulates adjoints.
//! Only a fixed set of primitives is supported; everything the models need
//! is composed from them.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::DMatrix;

use super::sparse::SparseMatrix;
use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    SpMatMul(Rc<SparseMatrix>, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a (r x c) + b (1 x c)` broadcast over rows.
    AddRow(usize, usize),
    /// `a (r x c) * b (r x 1)` broadcast over columns.
    MulCol(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Recip(usize),
    Powf(usize, f64),
    ClampMin(usize, f64),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    MeanRows(usize),
    /// Column-wise max over rows; stores the winning row per column.
    MaxRows(usize, Vec<usize>),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    /// Segment max; stores the winning source row per output entry (or
    /// `usize::MAX` for an empty segment), column-major like the output.
    SegmentMax(usize, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a single forward pass. Single-use, single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` if it did not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn row_sum(x: &Matrix) -> Matrix {
    Matrix::from_fn(1, x.ncols(), |_, j| x.column(j).sum())
}

fn col_sum(x: &Matrix) -> Matrix {
    Matrix::from_fn(x.nrows(), 1, |i, _| x.row(i).sum())
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
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

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&Matrix) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let (rows, cols) = self.shape(v);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        Ok(self.nodes.borrow()[v.0].value[(0, 0)])
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Matrix) -> Matrix) -> Var {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a.0].value), nodes[a.0].needs_grad)
        };
        self.push(value, op, ng)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        op: Op,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>,
    ) -> Result<Var> {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            (f(&na.value, &nb.value)?, na.needs_grad || nb.needs_grad)
        };
        Ok(self.push(value, op, ng))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::MatMul(a.0, b.0), |x, y| {
            if x.ncols() != y.nrows() {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: x.shape(),
                    rhs: y.shape(),
                });
            }
            Ok(x * y)
        })
    }

    /// Constant sparse matrix times a recorded dense matrix.
    pub fn spmm(&self, s: Rc<SparseMatrix>, b: Var) -> Result<Var> {
        let (rows, cols) = (s.rows(), s.cols());
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let nb = &nodes[b.0];
            if cols != nb.value.nrows() {
                return Err(Error::Shape {
                    op: "spmm",
                    lhs: (rows, cols),
                    rhs: nb.value.shape(),
                });
            }
            (s.mul_dense(&nb.value), nb.needs_grad)
        };
        Ok(self.push(value, Op::SpMatMul(s, b.0), ng))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Op::Transpose(a.0), |x| x.transpose())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| {
            check_same("add", x, y)?;
            Ok(x + y)
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| {
            check_same("sub", x, y)?;
            Ok(x - y)
        })
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| {
            check_same("mul", x, y)?;
            Ok(x.component_mul(y))
        })
    }

    /// Adds a `1 x c` row vector to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        self.binary(a, row, Op::AddRow(a.0, row.0), |x, r| {
            if r.nrows() != 1 || r.ncols() != x.ncols() {
                return Err(Error::Shape {
                    op: "add_row",
                    lhs: x.shape(),
                    rhs: r.shape(),
                });
            }
            let mut out = x.clone();
            for mut row_view in out.row_iter_mut() {
                row_view += r.row(0);
            }
            Ok(out)
        })
    }

    /// Scales row `i` of `a` by `col[i]`, where `col` is `r x 1`.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        self.binary(a, col, Op::MulCol(a.0, col.0), |x, c| {
            if c.ncols() != 1 || c.nrows() != x.nrows() {
                return Err(Error::Shape {
                    op: "mul_col",
                    lhs: x.shape(),
                    rhs: c.shape(),
                });
            }
            let mut out = x.clone();
            for (i, mut row_view) in out.row_iter_mut().enumerate() {
                row_view *= c[(i, 0)];
            }
            Ok(out)
        })
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.0, c), |x| x * c)
    }

    /// Adds a scalar to every entry.
    pub fn shift(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a.0), |x| x.add_scalar(c))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.map(|v| v.max(0.0)))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.map(f64::exp))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), |x| x.map(f64::ln))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), |x| x.map(f64::sqrt))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), |x| x.map(f64::tanh))
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, Op::Recip(a.0), |x| x.map(|v| 1.0 / v))
    }

    pub fn powf(&self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a.0, p), |x| x.map(|v| v.powf(p)))
    }

    pub fn clamp_min(&self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a.0, lo), |x| x.map(|v| v.max(lo)))
    }

    /// Sum of all entries, as a `1 x 1` matrix.
    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::SumAll(a.0), |x| Matrix::from_element(1, 1, x.sum()))
    }

    /// Sums over rows, giving `1 x c`.
    pub fn sum_rows(&self, a: Var) -> Var {
        self.unary(a, Op::SumRows(a.0), row_sum)
    }

    /// Sums each row, giving `r x 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        self.unary(a, Op::SumCols(a.0), col_sum)
    }

    /// Mean over rows, giving `1 x c`.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        if self.shape(a).0 == 0 {
            return Err(Error::invalid("mean over zero rows"));
        }
        Ok(self.unary(a, Op::MeanRows(a.0), |x| row_sum(x) / x.nrows() as f64))
    }

    /// Column-wise max over rows, giving `1 x c`. Ties go to the first row.
    pub fn max_rows(&self, a: Var) -> Result<Var> {
        let (value, arg, ng) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.nrows() == 0 {
                return Err(Error::invalid("max over zero rows"));
            }
            let mut arg = Vec::with_capacity(x.ncols());
            let mut out = Matrix::zeros(1, x.ncols());
            for j in 0..x.ncols() {
                let mut best = 0;
                for i in 1..x.nrows() {
                    if x[(i, j)] > x[(best, j)] {
                        best = i;
                    }
                }
                arg.push(best);
                out[(0, j)] = x[(best, j)];
            }
            (out, arg, nodes[a.0].needs_grad)
        };
        Ok(self.push(value, Op::MaxRows(a.0, arg), ng))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::ConcatCols(a.0, b.0), |x, y| {
            if x.nrows() != y.nrows() {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: x.shape(),
                    rhs: y.shape(),
                });
            }
            let mut out = Matrix::zeros(x.nrows(), x.ncols() + y.ncols());
            out.columns_mut(0, x.ncols()).copy_from(x);
            out.columns_mut(x.ncols(), y.ncols()).copy_from(y);
            Ok(out)
        })
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of nothing"));
        }
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.ncols();
            let mut rows = 0;
            let mut ng = false;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.ncols() != cols {
                    return Err(Error::Shape {
                        op: "concat_rows",
                        lhs: nodes[parts[0].0].value.shape(),
                        rhs: v.shape(),
                    });
                }
                rows += v.nrows();
                ng |= nodes[p.0].needs_grad;
            }
            let mut out = Matrix::zeros(rows, cols);
            let mut at = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                out.rows_mut(at, v.nrows()).copy_from(v);
                at += v.nrows();
            }
            (out, ng)
        };
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Row `k` of the output is row `idx[k]` of `a`.
    pub fn gather_rows(&self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if let Some(&bad) = idx.iter().find(|&&i| i >= x.nrows()) {
                return Err(Error::invalid(format!(
                    "gather index {bad} out of range for {} rows",
                    x.nrows()
                )));
            }
            let mut out = Matrix::zeros(idx.len(), x.ncols());
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(k).copy_from(&x.row(i));
            }
            (out, nodes[a.0].needs_grad)
        };
        Ok(self.push(value, Op::GatherRows(a.0, idx), ng))
    }

    /// Output has `n` rows; row `idx[e]` accumulates row `e` of `a`.
    pub fn scatter_add_rows(&self, a: Var, idx: Rc<[usize]>, n: usize) -> Result<Var> {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if idx.len() != x.nrows() || idx.iter().any(|&i| i >= n) {
                return Err(Error::invalid("scatter index does not match input"));
            }
            let mut out = Matrix::zeros(n, x.ncols());
            for (e, &i) in idx.iter().enumerate() {
                let mut dst = out.row_mut(i);
                dst += x.row(e);
            }
            (out, nodes[a.0].needs_grad)
        };
        Ok(self.push(value, Op::ScatterAddRows(a.0, idx), ng))
    }

    /// Output has `n` rows; row `i` is the column-wise max over rows `e`
    /// with `idx[e] == i` (zero for empty segments).
    pub fn segment_max(&self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (value, arg, ng) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if idx.len() != x.nrows() || idx.iter().any(|&i| i >= n) {
                return Err(Error::invalid("segment index does not match input"));
            }
            let cols = x.ncols();
            let mut arg = vec![usize::MAX; n * cols];
            let mut out = Matrix::zeros(n, cols);
            for (e, &i) in idx.iter().enumerate() {
                for j in 0..cols {
                    let slot = j * n + i;
                    if arg[slot] == usize::MAX || x[(e, j)] > out[(i, j)] {
                        arg[slot] = e;
                        out[(i, j)] = x[(e, j)];
                    }
                }
            }
            (out, arg, nodes[a.0].needs_grad)
        };
        Ok(self.push(value, Op::SegmentMax(a.0, arg), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Matrix::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<Matrix>], nodes: &[Node], i: usize, g: Matrix) {
            if !nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &nodes[k];
            if !node.needs_grad {
                continue;
            }
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut grads, &nodes, *a, &g * val(*b).transpose());
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, &nodes, *b, val(*a).transpose() * &g);
                    }
                }
                Op::SpMatMul(s, b) => {
                    acc(&mut grads, &nodes, *b, s.transpose().mul_dense(&g));
                }
                Op::Transpose(a) => acc(&mut grads, &nodes, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, -g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, &nodes, *a, g.component_mul(val(*b)));
                    acc(&mut grads, &nodes, *b, g.component_mul(val(*a)));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, &nodes, *r, row_sum(&g));
                    acc(&mut grads, &nodes, *a, g.clone());
                }
                Op::MulCol(a, c) => {
                    let x = val(*a);
                    let col = val(*c);
                    if nodes[*c].needs_grad {
                        acc(&mut grads, &nodes, *c, col_sum(&g.component_mul(x)));
                    }
                    let mut ga = g.clone();
                    for (i, mut row_view) in ga.row_iter_mut().enumerate() {
                        row_view *= col[(i, 0)];
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Scale(a, c) => acc(&mut grads, &nodes, *a, &g * *c),
                Op::Shift(a) => acc(&mut grads, &nodes, *a, g.clone()),
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, &nodes, *a, g.component_mul(out)),
                Op::Log(a) => acc(&mut grads, &nodes, *a, g.component_div(val(*a))),
                Op::Sqrt(a) => {
                    let ga = g.zip_map(out, |gv, y| gv / (2.0 * y));
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(out, |gv, y| gv * (1.0 - y * y));
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = g.zip_map(out, |gv, y| -gv * y * y);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let ga = if p == 0.0 {
                        Matrix::zeros(g.nrows(), g.ncols())
                    } else {
                        g.zip_map(val(*a), |gv, x| gv * p * x.powf(p - 1.0))
                    };
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::ClampMin(a, lo) => {
                    let ga = g.zip_map(val(*a), |gv, x| if x > *lo { gv } else { 0.0 });
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, &nodes, *a, Matrix::from_element(r, c, g[(0, 0)]));
                }
                Op::SumRows(a) => {
                    let r = val(*a).nrows();
                    let ga = Matrix::from_fn(r, g.ncols(), |_, j| g[(0, j)]);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SumCols(a) => {
                    let c = val(*a).ncols();
                    let ga = Matrix::from_fn(g.nrows(), c, |i, _| g[(i, 0)]);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::MeanRows(a) => {
                    let r = val(*a).nrows();
                    let inv = 1.0 / r as f64;
                    let ga = Matrix::from_fn(r, g.ncols(), |_, j| g[(0, j)] * inv);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (j, &i) in arg.iter().enumerate() {
                        ga[(i, j)] += g[(0, j)];
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).ncols();
                    let cb = val(*b).ncols();
                    acc(&mut grads, &nodes, *a, g.columns(0, ca).into_owned());
                    acc(&mut grads, &nodes, *b, g.columns(ca, cb).into_owned());
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let r = val(p).nrows();
                        acc(&mut grads, &nodes, p, g.rows(at, r).into_owned());
                        at += r;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += g.row(k);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::ScatterAddRows(a, idx) => {
                    let c = val(*a).ncols();
                    let mut ga = Matrix::zeros(idx.len(), c);
                    for (e, &i) in idx.iter().enumerate() {
                        ga.row_mut(e).copy_from(&g.row(i));
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SegmentMax(a, arg) => {
                    let (r, c) = val(*a).shape();
                    let n = g.nrows();
                    let mut ga = Matrix::zeros(r, c);
                    for j in 0..c {
                        for i in 0..n {
                            let src = arg[j * n + i];
                            if src != usize::MAX {
                                ga[(src, j)] += g[(i, j)];
                            }
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
            }
            grads[k] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
