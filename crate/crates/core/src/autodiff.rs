//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every primitive appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in exact reverse order and accumulates adjoints. All reductions use a
//! fixed, index-ordered accumulation so repeated runs are bit-identical.
//!
//! ```
//! use svco::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 1×n row matrix.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `ln(1 + e^x)` without overflow for large `x` or cancellation for very negative `x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x)`, evaluated as `-softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Naive matrix product `a (n×k) · b (k×m)`, accumulated in `k` order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("matmul")?;
    let (k2, m) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

fn transpose(a: &Tensor) -> Tensor {
    let (n, m) = a.dims2("transpose").expect("rank-2");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data[i * m + j];
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Stabilized log-softmax along `axis`.
pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(TensorError::InvalidAxis {
            op: "log_softmax",
            axis,
            rank: x.shape.len(),
        });
    }
    let (outer, len, inner) = axis_layout(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x.data[idx(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                sum += (x.data[idx(j)] - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..len {
                out[idx(j)] = x.data[idx(j)] - lse;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    LogSigmoid(Var),
    Softplus(Var),
    LogSoftmax(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    Sum(Var),
    SumRows(Var),
    Index(Var, usize),
    Stack(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive ops. Node order is execution order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`, or zeros if nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Identity in the forward pass, gradient barrier in the backward pass.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("add_row")?;
        let r = self.value(row);
        if r.len() != m || r.shape.len() != 2 || r.shape[0] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: vec![n, m],
                right: r.shape.clone(),
            });
        }
        let mut v = self.value(a).clone();
        for i in 0..n {
            for j in 0..m {
                v.data[i * m + j] += r.data[j];
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = log_softmax(self.value(a), axis)?;
        Ok(self.push(v, Op::LogSoftmax(a, axis)))
    }

    /// Embedding lookup: rows `ids` of a `V×d` table, giving `len(ids)×d`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&t.data[id * cols..(id + 1) * cols]);
        }
        let v = Tensor {
            shape: vec![ids.len(), cols],
            data,
        };
        Ok(self.push(v, Op::GatherRows(table, ids.to_vec())))
    }

    /// `out[i] = a[i, ids[i]]` for an `n×m` matrix, giving a length-`n` vector.
    pub fn pick_per_row(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = t.dims2("pick_per_row")?;
        if ids.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "pick_per_row",
                left: vec![n, m],
                right: vec![ids.len()],
            });
        }
        let mut data = Vec::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            if id >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_per_row",
                    index: id,
                    bound: m,
                });
            }
            data.push(t.data[i * m + id]);
        }
        Ok(self.push(Tensor::vector(data), Op::PickPerRow(a, ids.to_vec())))
    }

    /// Sum of all elements, in storage order.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = 0.0;
        for &x in &self.value(a).data {
            s += x;
        }
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Column sums of an `n×m` matrix, giving `1×m`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("sum_rows")?;
        let t = self.value(a);
        let mut out = vec![0.0; m];
        for row in t.data.chunks_exact(m.max(1)).take(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Ok(self.push(Tensor::row(out), Op::SumRows(a)))
    }

    /// Element `i` (flat index) as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "index",
                index: i,
                bound: t.len(),
            });
        }
        let v = Tensor::scalar(t.data[i]);
        Ok(self.push(v, Op::Index(a, i)))
    }

    /// Concatenates scalars into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(items.len());
        for &v in items {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(TensorError::Rank {
                    op: "stack",
                    expected: 0,
                    shape: t.shape.clone(),
                });
            }
            data.push(t.data[0]);
        }
        Ok(self.push(Tensor::vector(data), Op::Stack(items.to_vec())))
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor {
            shape: lv.shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                // Leaves keep their adjoint for the caller.
                Op::Leaf => grads[idx] = Some(g),
                Op::Constant | Op::Detach => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = matmul(&g, &transpose(bv))?;
                    let gb = matmul(&transpose(av), &g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.map(|x| -x);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(self.value(*b), |x, y| x * y);
                    let gb = g.zip(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let (n, m) = g.dims2("add_row")?;
                    let mut gr = vec![0.0; m];
                    for r in g.data.chunks_exact(m.max(1)).take(n) {
                        for (o, x) in gr.iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                    let gr = Tensor {
                        shape: self.value(*row).shape.clone(),
                        data: gr,
                    };
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Tanh(a) => {
                    let ga = g.zip(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip(&node.value, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    // d/dx ln σ(x) = σ(-x)
                    let ga = g.zip(self.value(*a), |x, v| x * sigmoid(-v));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip(self.value(*a), |x, v| x * sigmoid(v));
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a, axis) => {
                    let (outer, len, inner) = axis_layout(&node.value.shape, *axis);
                    let y = &node.value;
                    let mut ga = g.clone();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut gsum = 0.0;
                            for j in 0..len {
                                gsum += g.data[at(j)];
                            }
                            for j in 0..len {
                                ga.data[at(j)] = g.data[at(j)] - y.data[at(j)].exp() * gsum;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(table, ids) => {
                    let tshape = &self.value(*table).shape;
                    let cols = tshape[1];
                    let mut gt = Tensor::zeros(tshape);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt.data[id * cols + c] += g.data[r * cols + c];
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::PickPerRow(a, ids) => {
                    let ashape = &self.value(*a).shape;
                    let m = ashape[1];
                    let mut ga = Tensor::zeros(ashape);
                    for (i, &id) in ids.iter().enumerate() {
                        ga.data[i * m + id] += g.data[i];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let gv = g.data[0];
                    let ga = self.value(*a).map(|_| gv);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let ashape = &self.value(*a).shape;
                    let (n, m) = (ashape[0], ashape[1]);
                    let mut ga = Tensor::zeros(ashape);
                    for i in 0..n {
                        ga.data[i * m..(i + 1) * m].copy_from_slice(&g.data);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Index(a, i) => {
                    let mut ga = Tensor::zeros(&self.value(*a).shape);
                    ga.data[*i] = g.data[0];
                    accumulate(&mut grads, *a, ga);
                }
                Op::Stack(items) => {
                    for (k, &v) in items.iter().enumerate() {
                        let gv = Tensor {
                            shape: self.value(v).shape.clone(),
                            data: vec![g.data[k]],
                        };
                        accumulate(&mut grads, v, gv);
                    }
                }
            }
        }

        // Only leaves carry gradients out of backward.
        for (idx, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                *g = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
