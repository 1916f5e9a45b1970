//! A small reverse-mode automatic differentiation tape over dense 2-D arrays.
//!
//! Every value on the tape is a row-major matrix (`rows x cols`); scalars are
//! `1 x 1`. Operations append a node and return a [`Var`] handle, and
//! [`Tape::backward`] sweeps the nodes once in reverse creation order, which
//! is a reverse topological order because a node can only refer to nodes that
//! existed before it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit floats.
pub type DenseArray = Array2<f64>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    LogFloor(usize, f64),
    Softmax(usize),
    LayerNorm(usize, Vec<f64>),
    SumRows(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Arc<DenseArray>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: DenseArray, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push_node(Arc::new(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Arc<DenseArray>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn variable(&mut self, value: impl Into<Arc<DenseArray>>) -> Var {
        self.push_node(value.into(), Op::Leaf, true)
    }

    /// A value that never receives gradient (detached).
    pub fn constant(&mut self, value: impl Into<Arc<DenseArray>>) -> Var {
        self.push_node(value.into(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&DenseArray> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    fn val(&self, i: usize) -> &DenseArray {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (x, w) = (self.val(ia), self.val(ib));
        if x.ncols() != w.nrows() {
            return Err(shape_err("matmul", x.shape(), w.shape()));
        }
        let out = x.dot(w);
        Ok(self.push(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    /// `a + row` with `row` (1 x m) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(row)?);
        let (x, r) = (self.val(ia), self.val(ib));
        if r.nrows() != 1 || r.ncols() != x.ncols() {
            return Err(shape_err("add_row", x.shape(), r.shape()));
        }
        let out = x + r;
        Ok(self.push(out, Op::AddRow(ia, ib), &[ia, ib]))
    }

    /// `a * row` with `row` (1 x m) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(row)?);
        let (x, r) = (self.val(ia), self.val(ib));
        if r.nrows() != 1 || r.ncols() != x.ncols() {
            return Err(shape_err("mul_row", x.shape(), r.shape()));
        }
        let out = x * r;
        Ok(self.push(out, Op::MulRow(ia, ib), &[ia, ib]))
    }

    /// `a * col` with `col` (n x 1) broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(col)?);
        let (x, c) = (self.val(ia), self.val(ib));
        if c.ncols() != 1 || c.nrows() != x.nrows() {
            return Err(shape_err("mul_col", x.shape(), c.shape()));
        }
        let out = x * c;
        Ok(self.push(out, Op::MulCol(ia, ib), &[ia, ib]))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(shape_err(what, self.val(ia).shape(), self.val(ib).shape()));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("add", a, b)?;
        let out = self.val(ia) + self.val(ib);
        Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("sub", a, b)?;
        let out = self.val(ia) - self.val(ib);
        Ok(self.push(out, Op::Sub(ia, ib), &[ia, ib]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("mul", a, b)?;
        let out = self.val(ia) * self.val(ib);
        Ok(self.push(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia) * c;
        Ok(self.push(out, Op::Scale(ia, c), &[ia]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia) + c;
        Ok(self.push(out, Op::AddScalar(ia), &[ia]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).mapv(f64::tanh);
        Ok(self.push(out, Op::Tanh(ia), &[ia]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).mapv(f64::exp);
        Ok(self.push(out, Op::Exp(ia), &[ia]))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).mapv(|x| x.max(floor).ln());
        Ok(self.push(out, Op::LogFloor(ia, floor), &[ia]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = softmax_rows(self.val(ia));
        Ok(self.push(out, Op::Softmax(ia), &[ia]))
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let x = self.val(ia);
        let m = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / m;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / m;
            let s = 1.0 / (var + eps).sqrt();
            row *= s;
            inv_std.push(s);
        }
        Ok(self.push(out, Op::LayerNorm(ia, inv_std), &[ia]))
    }

    /// Sum over columns: `n x m -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.val(ia).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(out, Op::SumRows(ia), &[ia]))
    }

    /// Sum of every entry: `-> 1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = Array2::from_elem((1, 1), self.val(ia).sum());
        Ok(self.push(out, Op::Sum(ia), &[ia]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Shannon entropy of each probability row: `n x k -> n x 1`.
    pub fn entropy_rows(&mut self, p: Var) -> Result<Var> {
        let lp = self.log_floor(p, crate::prob::LOG_FLOOR)?;
        let plp = self.mul(p, lp)?;
        let s = self.sum_rows(plp)?;
        self.scale(s, -1.0)
    }

    /// `KL(p || q)` per row: `n x k -> n x 1`.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let lp = self.log_floor(p, crate::prob::LOG_FLOOR)?;
        let lq = self.log_floor(q, crate::prob::LOG_FLOOR)?;
        let d = self.sub(lp, lq)?;
        let t = self.mul(p, d)?;
        self.sum_rows(t)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.index(root)?;
        if self.val(r).shape() != [1, 1] {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.val(r).shape()
            )));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        grads[r] = Some(Array2::ones((1, 1)));
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let needs = |j: usize| self.nodes[j].requires_grad;
        let mut acc = |j: usize, delta: DenseArray| {
            if !needs(j) {
                return;
            }
            match &mut grads[j] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.dot(&self.val(*b).t()));
                }
                if needs(*b) {
                    acc(*b, self.val(*a).t().dot(g));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if needs(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, b) => {
                if needs(*a) {
                    acc(*a, g * self.val(*b));
                }
                if needs(*b) {
                    let prod = g * self.val(*a);
                    acc(*b, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, b) => {
                if needs(*a) {
                    acc(*a, g * self.val(*b));
                }
                if needs(*b) {
                    let prod = g * self.val(*a);
                    acc(*b, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if needs(*b) {
                    acc(*b, -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g * self.val(*b));
                }
                if needs(*b) {
                    acc(*b, g * self.val(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                let y = self.val(i);
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * self.val(i)),
            Op::LogFloor(a, floor) => {
                let x = self.val(*a);
                let mut d = g.clone();
                Zip::from(&mut d).and(x).for_each(|d, &x| {
                    *d = if x > *floor { *d / x } else { 0.0 };
                });
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let y = self.val(i);
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y * s);
                }
                acc(*a, d);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = self.val(i);
                let m = y.ncols() as f64;
                let mut d = g.clone();
                for ((mut drow, yrow), s) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let mean_g = drow.sum() / m;
                    let mean_gy = drow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum::<f64>() / m;
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &y| *d = s * (*d - mean_g - y * mean_gy));
                }
                acc(*a, d);
            }
            Op::SumRows(a) => {
                let shape = self.val(*a).dim();
                acc(*a, g.broadcast(shape).expect("column broadcast").to_owned());
            }
            Op::Sum(a) => {
                let shape = self.val(*a).dim();
                acc(*a, Array2::from_elem(shape, g[[0, 0]]));
            }
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &DenseArray) -> DenseArray {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros if `v` does not
    /// influence the root or is detached.
    pub fn wrt(&self, v: Var) -> Result<DenseArray> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.index]),
        })
    }
}
