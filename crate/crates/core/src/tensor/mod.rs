//! Dense double-precision tensors with a define-by-run reverse-mode tape.
//!
//! Learnable parameters live in [`Tensor`]s owned by the models. Every forward
//! pass records onto a fresh [`Tape`]: parameters are registered as leaves,
//! operations on [`Var`] handles append nodes, and [`Tape::backward`] replays
//! the recorded nodes in reverse to produce [`Gradients`].
//!
//! Shapes are limited to rank 0, 1 and 2. Binary element-wise ops accept two
//! equal shapes, or a right operand whose shape is a trailing suffix of the
//! left operand's shape (batch broadcast over the leading dimension).

pub mod kernels;

use std::cell::RefCell;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss variable was recorded on a different tape")]
    ForeignTape,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dense row-major tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.len() > 2 {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("rank <= 2")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![], vec![v]).expect("scalar")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows of a matrix (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Errors if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }

    /// Stacks equally sized rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::matrix(idx.len(), c, data).expect("row selection")
    }
}

/// Operation kinds accepted by [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    /// Multiplication by a constant.
    Scale(f64),
    /// Sum of all entries to a scalar.
    Sum,
    /// Mean of all entries to a scalar.
    Mean,
    /// Sum along the last axis.
    SumLast,
    /// `log Σ exp` along the last axis.
    LogSumExp,
    /// Repeat along a new leading axis of the given extent.
    Broadcast(usize),
    /// Half-open range along the last axis.
    Slice(usize, usize),
    /// Concatenation along the last axis.
    Concat,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    LogSumExp(usize),
    Broadcast(usize),
    Slice(usize, usize, usize),
    Concat(Vec<usize>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; v.numel()])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast-compatible if `rhs` (minus leading unit axes) is a suffix of `lhs`.
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    let first = rhs.iter().position(|&d| d != 1).unwrap_or(rhs.len());
    let rhs = &rhs[first..];
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Accumulates `g` into `acc`, folding over the broadcast dimension when shorter.
fn accumulate(acc: &mut [f64], g: &[f64]) {
    let m = acc.len();
    if m == g.len() {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    } else {
        for (i, v) in g.iter().enumerate() {
            acc[i % m] += v;
        }
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

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a tensor; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    /// Takes ownership of the data without copying; never receives a gradient.
    pub fn constant_owned(&self, t: Tensor) -> Var<'_> {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    /// Generic entry point: applies `kind` to `inputs` and records the result.
    pub fn forward_op<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => 2,
            OpKind::Concat => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity || inputs.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(TensorError::Shape {
                op: "forward_op",
                lhs: vec![arity],
                rhs: vec![inputs.len()],
            });
        }
        let x = inputs[0];
        match kind {
            OpKind::Add => x.add(inputs[1]),
            OpKind::Sub => x.sub(inputs[1]),
            OpKind::Mul => x.mul(inputs[1]),
            OpKind::MatMul => x.matmul(inputs[1]),
            OpKind::Relu => Ok(x.relu()),
            OpKind::Tanh => Ok(x.tanh()),
            OpKind::Exp => x.exp(),
            OpKind::Log => x.log(),
            OpKind::Sqrt => x.sqrt(),
            OpKind::Square => Ok(x.square()),
            OpKind::Abs => Ok(x.abs()),
            OpKind::Scale(c) => Ok(x.scale(c)),
            OpKind::Sum => Ok(x.sum()),
            OpKind::Mean => Ok(x.mean()),
            OpKind::SumLast => x.sum_last(),
            OpKind::LogSumExp => x.logsumexp(),
            OpKind::Broadcast(n) => x.broadcast(n),
            OpKind::Slice(s, e) => x.slice(s, e),
            OpKind::Concat => Var::concat(inputs),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::ForeignTape);
        }
        let nodes = self.nodes.borrow();
        let shape = &nodes[loss.id].shape;
        if numel(shape) != 1 || shape.len() > 1 {
            return Err(TensorError::NotScalar(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(s) = slot(grads, nodes, a) {
                accumulate(s, g);
            }
            if let Some(s) = slot(grads, nodes, b) {
                accumulate(s, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(grads, nodes, a) {
                accumulate(s, g);
            }
            if let Some(s) = slot(grads, nodes, b) {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(s, &neg);
            }
        }
        Op::Mul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let mb = bv.len();
            if nodes[a].requires_grad {
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * bv[i % mb]).collect();
                accumulate(slot(grads, nodes, a).unwrap(), &ga);
            }
            if nodes[b].requires_grad {
                let gb: Vec<f64> = g.iter().zip(av).map(|(v, x)| v * x).collect();
                accumulate(slot(grads, nodes, b).unwrap(), &gb);
            }
        }
        Op::MatMul(a, b) => {
            let (n, p) = (nodes[a].shape[0], nodes[a].shape[1]);
            let m = nodes[b].shape[1];
            if nodes[a].requires_grad {
                let bv = &nodes[b].value;
                kernels::matmul_nt_acc(g, bv, slot(grads, nodes, a).unwrap(), n, p, m);
            }
            if nodes[b].requires_grad {
                let av = &nodes[a].value;
                kernels::matmul_tn_acc(av, g, slot(grads, nodes, b).unwrap(), n, p, m);
            }
        }
        Op::Relu(a) => {
            let x = &nodes[a].value;
            if let Some(s) = slot(grads, nodes, a) {
                for ((acc, gv), xv) in s.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *acc += gv;
                    }
                }
            }
        }
        Op::Tanh(a) => {
            let y = &node.value;
            if let Some(s) = slot(grads, nodes, a) {
                for ((acc, gv), yv) in s.iter_mut().zip(g).zip(y) {
                    *acc += gv * (1.0 - yv * yv);
                }
            }
        }
        Op::Exp(a) => {
            let y = &node.value;
            if let Some(s) = slot(grads, nodes, a) {
                for ((acc, gv), yv) in s.iter_mut().zip(g).zip(y) {
                    *acc += gv * yv;
                }
            }
        }
        Op::Log(a) => {
            let x = &nodes[a].value;
            if let Some(s) = slot(grads, nodes, a) {
                for ((acc, gv), xv) in s.iter_mut().zip(g).zip(x) {
                    *acc += gv / xv;
                }
            }
        }
        Op::Sqrt(a) => {
            let y = &node.value;
            if let Some(s) = slot(grads, nodes, a) {
                for ((acc, gv), yv) in s.iter_mut().zip(g).zip(y) {
                    *acc += gv * 0.5 / yv;
                }
            }
        }
        Op::Square(a) => {
            let x = &nodes[a].value;
            if let Some(s) = slot(grads, nodes, a) {
                for ((acc, gv), xv) in s.iter_mut().zip(g).zip(x) {
                    *acc += 2.0 * gv * xv;
                }
            }
        }
        Op::Abs(a) => {
            let x = &nodes[a].value;
            if let Some(s) = slot(grads, nodes, a) {
                for ((acc, gv), xv) in s.iter_mut().zip(g).zip(x) {
                    // abs'(0) := 0
                    *acc += gv
                        * if *xv > 0.0 {
                            1.0
                        } else if *xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(grads, nodes, a) {
                for (acc, gv) in s.iter_mut().zip(g) {
                    *acc += c * gv;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(grads, nodes, a) {
                s.iter_mut().for_each(|acc| *acc += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            if let Some(s) = slot(grads, nodes, a) {
                s.iter_mut().for_each(|acc| *acc += g[0] / n);
            }
        }
        Op::SumLast(a) => {
            let m = *nodes[a].shape.last().unwrap_or(&1);
            if let Some(s) = slot(grads, nodes, a) {
                for (i, acc) in s.iter_mut().enumerate() {
                    *acc += g[i / m];
                }
            }
        }
        Op::LogSumExp(a) => {
            let m = *nodes[a].shape.last().unwrap_or(&1);
            let x = &nodes[a].value;
            let y = &node.value;
            if let Some(s) = slot(grads, nodes, a) {
                for (i, acc) in s.iter_mut().enumerate() {
                    let r = i / m;
                    if y[r].is_finite() {
                        *acc += g[r] * (x[i] - y[r]).exp();
                    }
                }
            }
        }
        Op::Broadcast(a) => {
            if let Some(s) = slot(grads, nodes, a) {
                accumulate(s, g);
            }
        }
        Op::Slice(a, start, end) => {
            let m = *nodes[a].shape.last().unwrap_or(&1);
            let w = end - start;
            if let Some(s) = slot(grads, nodes, a) {
                for (idx, gv) in g.iter().enumerate() {
                    let (r, c) = (idx / w, idx % w);
                    s[r * m + start + c] += gv;
                }
            }
        }
        Op::Concat(ref parts) => {
            let total = *node.shape.last().unwrap_or(&1);
            let rows = node.value.len() / total.max(1);
            let mut offset = 0;
            for &p in parts {
                let w = *nodes[p].shape.last().unwrap_or(&1);
                if let Some(s) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        for c in 0..w {
                            s[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
    }
}

impl<'t> Var<'t> {
    fn with_node<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_node(|n| n.shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.with_node(|n| n.value.len())
    }

    pub fn data(&self) -> Vec<f64> {
        self.with_node(|n| n.value.clone())
    }

    pub fn value(&self) -> Tensor {
        self.with_node(|n| Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shape"))
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.with_node(|n| n.value[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.with_node(|n| n.requires_grad)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.with_node(|n| n.value.iter().all(|v| v.is_finite())) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            })
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value, rg) = self.with_node(|n| {
            (
                n.shape.clone(),
                n.value.iter().map(|&x| f(x)).collect::<Vec<_>>(),
                n.requires_grad,
            )
        });
        self.tape.push(shape, value, op, rg)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other, name)?;
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            if a.shape != b.shape && !broadcast_ok(&a.shape, &b.shape) {
                return Err(TensorError::Shape {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let mb = b.value.len();
            let value: Vec<f64> = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.value[i % mb]))
                .collect();
            (a.shape.clone(), value, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::Shape {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (n, p, m) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; n * m];
            kernels::matmul(&a.value, &b.value, &mut out, n, p, m);
            (vec![n, m], out, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, value, Op::MatMul(self.id, other.id), rg))
    }

    /// `max(x, 0)`, with derivative 0 at the kink.
    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let out = self.unary(Op::Exp(self.id), f64::exp);
        if out.with_node(|n| n.value.iter().any(|v| v.is_infinite())) {
            return Err(TensorError::Domain {
                op: "exp",
                detail: "overflow".into(),
            });
        }
        Ok(out)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if self.with_node(|n| n.value.iter().any(|&v| v <= 0.0 || v.is_nan())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "non-positive argument".into(),
            });
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.with_node(|n| n.value.iter().any(|&v| v <= 0.0 || v.is_nan())) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: "non-positive argument".into(),
            });
        }
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// `|x|`, with derivative 0 at the kink.
    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn sum(self) -> Var<'t> {
        let (s, rg) = self.with_node(|n| (n.value.iter().sum::<f64>(), n.requires_grad));
        self.tape.push(vec![], vec![s], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let (s, rg) = self.with_node(|n| {
            (
                n.value.iter().sum::<f64>() / n.value.len() as f64,
                n.requires_grad,
            )
        });
        self.tape.push(vec![], vec![s], Op::Mean(self.id), rg)
    }

    fn last_axis_reduce(&self, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var<'t>> {
        let (shape, value, rg) = self.with_node(|n| {
            let m = *n.shape.last().unwrap_or(&1);
            let out_shape = n.shape[..n.shape.len().saturating_sub(1)].to_vec();
            let value: Vec<f64> = if m == 0 {
                vec![f(&[]); numel(&out_shape)]
            } else {
                n.value.chunks(m).map(&f).collect()
            };
            (out_shape, value, n.requires_grad)
        });
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Sum along the last axis: `[n, m] -> [n]`, `[m] -> []`.
    pub fn sum_last(self) -> Result<Var<'t>> {
        self.last_axis_reduce(Op::SumLast(self.id), |r| r.iter().sum())
    }

    /// Overflow-safe `log Σ exp` along the last axis.
    pub fn logsumexp(self) -> Result<Var<'t>> {
        self.last_axis_reduce(Op::LogSumExp(self.id), kernels::logsumexp)
    }

    /// Repeats the value `n` times along a new leading axis.
    pub fn broadcast(self, n: usize) -> Result<Var<'t>> {
        let (shape, value, rg) = self.with_node(|node| {
            let mut shape = vec![n];
            shape.extend_from_slice(&node.shape);
            (shape, node.value.repeat(n), node.requires_grad)
        });
        if shape.len() > 2 {
            return Err(TensorError::Shape {
                op: "broadcast",
                lhs: shape,
                rhs: vec![n],
            });
        }
        Ok(self.tape.push(shape, value, Op::Broadcast(self.id), rg))
    }

    /// Half-open range `[start, end)` along the last axis.
    pub fn slice(self, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let m = *shape.last().unwrap_or(&1);
        if shape.is_empty() || start >= end || end > m {
            return Err(TensorError::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![start, end],
            });
        }
        let (value, rg) = self.with_node(|n| {
            let v: Vec<f64> = n
                .value
                .chunks(m)
                .flat_map(|r| r[start..end].iter().copied())
                .collect();
            (v, n.requires_grad)
        });
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = end - start;
        Ok(self
            .tape
            .push(out_shape, value, Op::Slice(self.id, start, end), rg))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: vec![],
                rhs: vec![],
            });
        };
        let tape = first.tape;
        let nodes = tape.nodes.borrow();
        let lead = &nodes[first.id].shape;
        if lead.is_empty() {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: lead.clone(),
                rhs: vec![],
            });
        }
        let lead_dims = &lead[..lead.len() - 1];
        let rows = numel(lead_dims);
        let mut total = 0;
        for p in parts {
            if !std::ptr::eq(p.tape, tape) {
                return Err(TensorError::ForeignTape);
            }
            let s = &nodes[p.id].shape;
            if s.len() != lead.len() || s[..s.len() - 1] != *lead_dims {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: lead.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[s.len() - 1];
        }
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let n = &nodes[p.id];
                let w = n.shape[n.shape.len() - 1];
                value.extend_from_slice(&n.value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead_dims.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        drop(nodes);
        Ok(tape.push(shape, value, Op::Concat(ids), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(&t(&[2, 1], &[2.0, 3.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.data(), vec![2.0, 3.0]);
    }

    #[test]
    fn relu_definition() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().data(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn logsumexp_of_zeros_is_log_two() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![0.0, 0.0]));
        let y = x.logsumexp().unwrap();
        assert!(y.shape().is_empty());
        assert!((y.item() - 0.693_147_180_559_945_3).abs() < 1e-15);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]).requiring_grad());
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_log() {
        let e = std::f64::consts::E;
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![e]).requiring_grad());
        let loss = x.log().unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!((g.wrt(x)[0] - 1.0 / e).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
        let c = tape.constant(&Tensor::zeros(&[4]));
        assert!(matches!(
            a.add(c),
            Err(TensorError::Shape { op: "add", .. })
        ));
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(
            x.log(),
            Err(TensorError::Domain { op: "log", .. })
        ));
        let y = tape.constant(&Tensor::vector(vec![1000.0]));
        assert!(matches!(
            y.exp(),
            Err(TensorError::Domain { op: "exp", .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).requiring_grad());
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let other = Tape::new();
        let y = other.leaf(&Tensor::scalar(1.0).requiring_grad());
        assert!(matches!(tape.backward(y), Err(TensorError::ForeignTape)));
    }

    #[test]
    fn leading_dim_broadcast() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).requiring_grad());
        let b = tape.leaf(&Tensor::vector(vec![10.0, 20.0]).requiring_grad());
        let c = a.add(b).unwrap();
        assert_eq!(c.data(), vec![11.0, 22.0, 13.0, 24.0]);
        let g = tape.backward(c.sum()).unwrap();
        assert_eq!(g.wrt(b), vec![2.0, 2.0]);
        assert_eq!(g.wrt(a), vec![1.0; 4]);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let l = a.slice(0, 1).unwrap();
        let r = a.slice(1, 3).unwrap();
        let back = Var::concat(&[l, r]).unwrap();
        assert_eq!(back.data(), a.data());
        assert_eq!(r.data(), vec![2.0, 3.0, 5.0, 6.0]);
        assert!(a.slice(2, 2).is_err());
    }

    #[test]
    fn clear_releases_nodes() {
        let mut tape = Tape::new();
        {
            let x = tape.constant(&Tensor::scalar(1.0));
            let _ = x.scale(2.0);
        }
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn no_grad_recorded_without_trainable_inputs() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![1.0]));
        let y = x.scale(3.0).sum();
        assert!(!y.requires_grad());
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }
}
