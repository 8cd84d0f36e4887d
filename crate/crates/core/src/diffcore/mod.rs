//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every value is a dense row-major `f64` tensor recorded on a [`Tape`].
//! Operations execute eagerly (define-by-run) and append a node with a
//! local gradient rule; [`Tensor::backward`] replays the tape in reverse,
//! visiting each node exactly once. The tape is single-threaded by design:
//! parallelism happens across whole training runs, never inside one.
//!
//! Broadcasting is deliberately restricted to scalar-tensor and
//! row-vector-to-matrix; everything else must be expanded explicitly.

mod check;

pub use check::grad_check;

use std::cell::RefCell;
use std::rc::Rc;
use thiserror::Error;

/// Errors from tensor construction, shape checks, and backward passes.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, DiffError>;

/// How a binary elementwise op pairs its operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Left operand is a scalar.
    LeftScalar,
    /// Right operand is a scalar.
    RightScalar,
    /// Left operand is a row vector `[n]`, right a matrix `[m, n]`.
    LeftRow,
    /// Right operand is a row vector `[n]`, left a matrix `[m, n]`.
    RightRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
        }
    }

    /// Partial derivatives (df/da, df/db) at one element pair.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinKind::Add => (1.0, 1.0),
            BinKind::Sub => (1.0, -1.0),
            BinKind::Mul => (b, a),
            BinKind::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

/// One recorded primitive with references to its inputs.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Bin(BinKind, usize, usize, Broadcast),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    RowGather(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Populated by `backward` for every node on a gradient path.
    grad: Option<Vec<f64>>,
    /// Leaf explicitly marked as differentiable.
    requires_grad: bool,
    /// This node or one of its ancestors requires a gradient.
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// A recording of executed primitives in topological order.
///
/// Cloning a `Tape` clones the handle, not the recording.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A handle to one value on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("data", &self.data())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_scalar_shape(shape: &[usize]) -> bool {
    shape.is_empty() || (shape.len() == 1 && shape[0] == 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf tensor. Panics if `data` does not fill `shape`.
    pub fn tensor(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let id = self.push(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Tensor {
        self.tensor(shape, data, false)
    }

    /// A scalar constant (shape `[]`).
    pub fn scalar(&self, value: f64) -> Tensor {
        self.constant(&[], vec![value])
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    /// Copy of the value buffer, row-major.
    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Copy of the gradient buffer, if `backward` reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// The single element of a scalar tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.data.len() != 1 {
            return Err(DiffError::NotScalar {
                op: "scalar_value",
                shape: node.shape.clone(),
            });
        }
        Ok(node.data[0])
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn check_same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(DiffError::InvalidArgument(format!(
                "{op}: operands recorded on different tapes"
            )));
        }
        Ok(())
    }

    fn record(&self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Tensor {
        let id = self.tape.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            needs_grad,
            op,
        });
        Tensor {
            tape: self.tape.clone(),
            id,
        }
    }

    fn node_needs_grad(&self, id: usize) -> bool {
        self.tape.inner.borrow().nodes[id].needs_grad
    }

    fn bin(&self, other: &Tensor, kind: BinKind) -> Result<Tensor> {
        self.check_same_tape(other, kind.name())?;
        let (lhs_shape, rhs_shape) = {
            let inner = self.tape.inner.borrow();
            (
                inner.nodes[self.id].shape.clone(),
                inner.nodes[other.id].shape.clone(),
            )
        };
        let bc = broadcast_kind(&lhs_shape, &rhs_shape).ok_or(DiffError::ShapeMismatch {
            op: kind.name(),
            lhs: lhs_shape.clone(),
            rhs: rhs_shape.clone(),
        })?;
        let out_shape = match bc {
            Broadcast::Same | Broadcast::RightScalar | Broadcast::RightRow => lhs_shape,
            Broadcast::LeftScalar | Broadcast::LeftRow => rhs_shape,
        };
        let out = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[other.id].data;
            let n = numel(&out_shape);
            let cols = *out_shape.last().unwrap_or(&1);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let (ai, bi) = broadcast_index(bc, i, cols);
                out.push(kind.apply(a[ai], b[bi]));
            }
            out
        };
        let needs = self.node_needs_grad(self.id) || self.node_needs_grad(other.id);
        Ok(self.record(out_shape, out, needs, Op::Bin(kind, self.id, other.id, bc)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.bin(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.bin(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.bin(other, BinKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.bin(other, BinKind::Div)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            (node.shape.clone(), node.data.iter().map(|&x| f(x)).collect())
        };
        self.record(shape, data, self.node_needs_grad(self.id), op)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::MulScalar(self.id, c), |x| x * c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log. Errors on non-positive input; clamp first when the
    /// argument can reach zero.
    pub fn log(&self) -> Result<Tensor> {
        {
            let inner = self.tape.inner.borrow();
            if inner.nodes[self.id].data.iter().any(|&x| x <= 0.0) {
                return Err(DiffError::InvalidArgument(
                    "log: non-positive input".to_string(),
                ));
            }
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    /// Square root. Errors on negative input; the derivative at exactly
    /// zero is taken as 0 (subgradient convention, as for relu).
    pub fn sqrt(&self) -> Result<Tensor> {
        {
            let inner = self.tape.inner.borrow();
            if inner.nodes[self.id].data.iter().any(|&x| x < 0.0) {
                return Err(DiffError::InvalidArgument(
                    "sqrt: negative input".to_string(),
                ));
            }
        }
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    /// max(0, x); the hinge used by the margin losses. Derivative at 0 is 0.
    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input already
    /// lies inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_tape(other, "matmul")?;
        let (a_shape, b_shape) = {
            let inner = self.tape.inner.borrow();
            (
                inner.nodes[self.id].shape.clone(),
                inner.nodes[other.id].shape.clone(),
            )
        };
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let out = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[other.id].data;
            matmul_raw(a, b, m, k, n)
        };
        let needs = self.node_needs_grad(self.id) || self.node_needs_grad(other.id);
        Ok(self.record(vec![m, n], out, needs, Op::Matmul(self.id, other.id)))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let out = {
            let inner = self.tape.inner.borrow();
            transpose_raw(&inner.nodes[self.id].data, r, c)
        };
        Ok(self.record(
            vec![c, r],
            out,
            self.node_needs_grad(self.id),
            Op::Transpose(self.id),
        ))
    }

    /// Softmax along the last axis of a 1-D vector or 2-D matrix,
    /// computed with max-subtraction. Errors on non-finite input.
    pub fn softmax(&self) -> Result<Tensor> {
        self.softmax_impl(false)
    }

    /// Log-softmax along the last axis, stabilized the same way.
    pub fn log_softmax(&self) -> Result<Tensor> {
        self.softmax_impl(true)
    }

    fn softmax_impl(&self, log: bool) -> Result<Tensor> {
        let shape = self.shape();
        let op_name = if log { "log_softmax" } else { "softmax" };
        if shape.is_empty() || shape.len() > 2 {
            return Err(DiffError::ShapeMismatch {
                op: op_name,
                lhs: shape,
                rhs: vec![],
            });
        }
        let cols = *shape.last().unwrap();
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].data;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite { op: op_name });
            }
            let mut out = vec![0.0; x.len()];
            for row in 0..x.len() / cols {
                let xs = &x[row * cols..(row + 1) * cols];
                let os = &mut out[row * cols..(row + 1) * cols];
                let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &v) in os.iter_mut().zip(xs) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                if log {
                    let lse = max + sum.ln();
                    for (o, &v) in os.iter_mut().zip(xs) {
                        *o = v - lse;
                    }
                } else {
                    for o in os.iter_mut() {
                        *o /= sum;
                    }
                }
            }
            out
        };
        let op = if log {
            Op::LogSoftmax(self.id)
        } else {
            Op::Softmax(self.id)
        };
        Ok(self.record(shape, out, self.node_needs_grad(self.id), op))
    }

    /// Sum over all elements, producing a scalar.
    pub fn sum(&self) -> Tensor {
        let total = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].data.iter().sum()
        };
        self.record(
            vec![],
            vec![total],
            self.node_needs_grad(self.id),
            Op::Sum(self.id),
        )
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&self) -> Tensor {
        let (total, n) = {
            let inner = self.tape.inner.borrow();
            let d = &inner.nodes[self.id].data;
            (d.iter().sum::<f64>(), d.len())
        };
        self.record(
            vec![],
            vec![total / n as f64],
            self.node_needs_grad(self.id),
            Op::Mean(self.id),
        )
    }

    /// Select rows of a 2-D matrix; a row may be selected more than once.
    /// Gradients scatter-add back into the source rows.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DiffError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let src = &inner.nodes[self.id].data;
            let mut out = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
            }
            out
        };
        Ok(self.record(
            vec![indices.len(), cols],
            out,
            self.node_needs_grad(self.id),
            Op::RowGather(self.id, indices.to_vec()),
        ))
    }

    /// Stack 2-D matrices with equal column counts along the row axis.
    pub fn concat_rows(pieces: &[Tensor]) -> Result<Tensor> {
        let first = pieces.first().ok_or_else(|| {
            DiffError::InvalidArgument("concat_rows: empty input list".to_string())
        })?;
        let mut cols = None;
        let mut rows = 0;
        for p in pieces {
            first.check_same_tape(p, "concat_rows")?;
            let s = p.shape();
            if s.len() != 2 {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: s,
                    rhs: vec![],
                });
            }
            match cols {
                None => cols = Some(s[1]),
                Some(c) if c != s[1] => {
                    return Err(DiffError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: vec![rows, c],
                        rhs: s,
                    })
                }
                _ => {}
            }
            rows += s[0];
        }
        let cols = cols.unwrap();
        let data = {
            let inner = first.tape.inner.borrow();
            let mut data = Vec::with_capacity(rows * cols);
            for p in pieces {
                data.extend_from_slice(&inner.nodes[p.id].data);
            }
            data
        };
        let needs = pieces.iter().any(|p| p.node_needs_grad(p.id));
        let ids = pieces.iter().map(|p| p.id).collect();
        Ok(first.record(vec![rows, cols], data, needs, Op::ConcatRows(ids)))
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let old = self.shape();
        if numel(shape) != numel(&old) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        let data = self.data();
        Ok(self.record(
            shape.to_vec(),
            data,
            self.node_needs_grad(self.id),
            Op::Reshape(self.id),
        ))
    }

    /// Inner product of two same-shape tensors.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.mul(other)?.sum())
    }

    /// Squared Euclidean distance between two same-shape tensors.
    pub fn squared_distance(&self, other: &Tensor) -> Result<Tensor> {
        let d = self.sub(other)?;
        Ok(d.mul(&d)?.sum())
    }

    /// Euclidean (L2) norm.
    pub fn l2_norm(&self) -> Result<Tensor> {
        self.mul(self)?.sum().sqrt()
    }

    /// Run the backward pass from this scalar root. Gradients from any
    /// previous backward call on the tape are discarded first.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        if nodes[self.id].data.len() != 1 {
            return Err(DiffError::NotScalar {
                op: "backward",
                shape: nodes[self.id].shape.clone(),
            });
        }
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].needs_grad {
                propagate(nodes, &mut grads, id, &g);
                nodes[id].grad = Some(g);
            } else if id == self.id {
                // Root always reports dL/dL = 1 even when nothing upstream
                // requires a gradient.
                nodes[id].grad = Some(g);
            }
        }
        Ok(())
    }
}

fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        Some(Broadcast::Same)
    } else if is_scalar_shape(lhs) {
        Some(Broadcast::LeftScalar)
    } else if is_scalar_shape(rhs) {
        Some(Broadcast::RightScalar)
    } else if lhs.len() == 1 && rhs.len() == 2 && rhs[1] == lhs[0] {
        Some(Broadcast::LeftRow)
    } else if rhs.len() == 1 && lhs.len() == 2 && lhs[1] == rhs[0] {
        Some(Broadcast::RightRow)
    } else {
        None
    }
}

/// Element indices of (lhs, rhs) feeding output element `i`.
fn broadcast_index(bc: Broadcast, i: usize, cols: usize) -> (usize, usize) {
    match bc {
        Broadcast::Same => (i, i),
        Broadcast::LeftScalar => (0, i),
        Broadcast::RightScalar => (i, 0),
        Broadcast::LeftRow => (i % cols, i),
        Broadcast::RightRow => (i, i % cols),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, write: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    write(buf);
}

/// Apply node `id`'s local gradient rule, accumulating into its parents.
fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let op = nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::Bin(kind, a, b, bc) => {
            let cols = *nodes[id].shape.last().unwrap_or(&1);
            let (pa_len, pb_len) = (nodes[a].data.len(), nodes[b].data.len());
            if nodes[a].needs_grad {
                accumulate(&mut grads[a], pa_len, |ga| {
                    for (i, &gi) in g.iter().enumerate() {
                        let (ai, bi) = broadcast_index(bc, i, cols);
                        let (pa, _) = kind.partials(nodes[a].data[ai], nodes[b].data[bi]);
                        ga[ai] += gi * pa;
                    }
                });
            }
            if nodes[b].needs_grad {
                accumulate(&mut grads[b], pb_len, |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        let (ai, bi) = broadcast_index(bc, i, cols);
                        let (_, pb) = kind.partials(nodes[a].data[ai], nodes[b].data[bi]);
                        gb[bi] += gi * pb;
                    }
                });
            }
        }
        Op::Neg(a) => {
            if nodes[a].needs_grad {
                accumulate(&mut grads[a], g.len(), |ga| {
                    for (gi, &go) in ga.iter_mut().zip(g) {
                        *gi -= go;
                    }
                });
            }
        }
        Op::AddScalar(a) => {
            if nodes[a].needs_grad {
                accumulate(&mut grads[a], g.len(), |ga| {
                    for (gi, &go) in ga.iter_mut().zip(g) {
                        *gi += go;
                    }
                });
            }
        }
        Op::MulScalar(a, c) => {
            if nodes[a].needs_grad {
                accumulate(&mut grads[a], g.len(), |ga| {
                    for (gi, &go) in ga.iter_mut().zip(g) {
                        *gi += c * go;
                    }
                });
            }
        }
        Op::Exp(a) => {
            if nodes[a].needs_grad {
                let out = &nodes[id].data;
                accumulate(&mut grads[a], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                });
            }
        }
        Op::Log(a) => {
            if nodes[a].needs_grad {
                let x = &nodes[a].data;
                accumulate(&mut grads[a], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
        }
        Op::Sqrt(a) => {
            if nodes[a].needs_grad {
                let out = &nodes[id].data;
                accumulate(&mut grads[a], g.len(), |ga| {
                    for i in 0..g.len() {
                        if out[i] > 0.0 {
                            ga[i] += g[i] / (2.0 * out[i]);
                        }
                    }
                });
            }
        }
        Op::Relu(a) => {
            if nodes[a].needs_grad {
                let x = &nodes[a].data;
                accumulate(&mut grads[a], g.len(), |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Clamp(a, lo, hi) => {
            if nodes[a].needs_grad {
                let x = &nodes[a].data;
                accumulate(&mut grads[a], g.len(), |ga| {
                    for i in 0..g.len() {
                        if x[i] >= lo && x[i] <= hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Matmul(a, b) => {
            let m = nodes[a].shape[0];
            let k = nodes[a].shape[1];
            let n = nodes[b].shape[1];
            if nodes[a].needs_grad {
                // dA = g @ B^T
                let bd = &nodes[b].data;
                accumulate(&mut grads[a], m * k, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                ga[i * k + l] += gv * bd[l * n + j];
                            }
                        }
                    }
                });
            }
            if nodes[b].needs_grad {
                // dB = A^T @ g
                let ad = &nodes[a].data;
                accumulate(&mut grads[b], k * n, |gb| {
                    for i in 0..m {
                        for l in 0..k {
                            let av = ad[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[l * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
        }
        Op::Transpose(a) => {
            if nodes[a].needs_grad {
                let (c, r) = (nodes[id].shape[0], nodes[id].shape[1]);
                let gt = transpose_raw(g, c, r);
                accumulate(&mut grads[a], gt.len(), |ga| {
                    for i in 0..gt.len() {
                        ga[i] += gt[i];
                    }
                });
            }
        }
        Op::Softmax(a) => {
            if nodes[a].needs_grad {
                let s = &nodes[id].data;
                let cols = *nodes[id].shape.last().unwrap();
                accumulate(&mut grads[a], g.len(), |ga| {
                    for row in 0..g.len() / cols {
                        let rng = row * cols..(row + 1) * cols;
                        let dot: f64 = g[rng.clone()]
                            .iter()
                            .zip(&s[rng.clone()])
                            .map(|(&gv, &sv)| gv * sv)
                            .sum();
                        for i in rng {
                            ga[i] += s[i] * (g[i] - dot);
                        }
                    }
                });
            }
        }
        Op::LogSoftmax(a) => {
            if nodes[a].needs_grad {
                let logp = &nodes[id].data;
                let cols = *nodes[id].shape.last().unwrap();
                accumulate(&mut grads[a], g.len(), |ga| {
                    for row in 0..g.len() / cols {
                        let rng = row * cols..(row + 1) * cols;
                        let gsum: f64 = g[rng.clone()].iter().sum();
                        for i in rng {
                            ga[i] += g[i] - logp[i].exp() * gsum;
                        }
                    }
                });
            }
        }
        Op::Sum(a) => {
            if nodes[a].needs_grad {
                let n = nodes[a].data.len();
                accumulate(&mut grads[a], n, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += g[0];
                    }
                });
            }
        }
        Op::Mean(a) => {
            if nodes[a].needs_grad {
                let n = nodes[a].data.len();
                let share = g[0] / n as f64;
                accumulate(&mut grads[a], n, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += share;
                    }
                });
            }
        }
        Op::RowGather(a, ref indices) => {
            if nodes[a].needs_grad {
                let cols = nodes[id].shape[1];
                let n = nodes[a].data.len();
                accumulate(&mut grads[a], n, |ga| {
                    for (row, &src) in indices.iter().enumerate() {
                        for c in 0..cols {
                            ga[src * cols + c] += g[row * cols + c];
                        }
                    }
                });
            }
        }
        Op::ConcatRows(ref ids) => {
            let cols = nodes[id].shape[1];
            let mut offset = 0;
            for &pid in ids {
                let rows = nodes[pid].shape[0];
                let len = rows * cols;
                if nodes[pid].needs_grad {
                    let block = &g[offset..offset + len];
                    accumulate(&mut grads[pid], len, |gp| {
                        for i in 0..len {
                            gp[i] += block[i];
                        }
                    });
                }
                offset += len;
            }
        }
        Op::Reshape(a) => {
            if nodes[a].needs_grad {
                accumulate(&mut grads[a], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
