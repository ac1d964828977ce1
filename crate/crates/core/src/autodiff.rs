//! Define-by-run reverse-mode automatic differentiation over small dense
//! `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents were
//! created earlier, so reverse creation order is a valid topological order
//! for the backward sweep. Graphs are cheap to build and are rebuilt for
//! every mini-batch.
//!
//! The one unusual operation is [`Graph::gradient_reversal`]: the identity in
//! the forward pass, a sign flip in the backward pass.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("tensor shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op} expects {expected} input(s), got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
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
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows of a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a matrix; rank-1 tensors are treated as one row.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Gathers the given rows of a matrix into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    /// Elementwise add; the right operand may be a row vector broadcast over rows.
    Add,
    /// Elementwise subtract, same broadcasting as `Add`.
    Sub,
    /// Elementwise multiply, same broadcasting as `Add`.
    Mul,
    Relu,
    Sigmoid,
    /// `log(1 + exp(t))`, overflow-safe.
    Softplus,
    Square,
    Sum,
    Mean,
    Scale(f64),
    GradientReversal,
    /// Per-column standardization over the batch: `(x - mean) / sqrt(var + eps)`,
    /// with biased batch variance. Gradients flow through the batch statistics.
    Standardize { eps: f64 },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Scale(_) => "scale",
            OpKind::GradientReversal => "gradient_reversal",
            OpKind::Standardize { .. } => "standardize",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: bool },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, bool),
    Sub(NodeId, NodeId, bool),
    Mul(NodeId, NodeId, bool),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    Reverse(NodeId),
    Standardize { input: NodeId, inv_std: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct Node {
    op: Op,
    value: Tensor,
    adjoint: Tensor,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn adjoint(&self) -> &Tensor {
        &self.adjoint
    }

    pub fn is_param(&self) -> bool {
        matches!(self.op, Op::Leaf { param: true })
    }
}

/// Adjoints of the parameter leaves of a graph after [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&id, |(k, _)| *k)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.entries.iter().map(|(k, t)| (*k, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Is `right` a row vector that broadcasts over the rows of `left`?
fn row_broadcast(left: &[usize], right: &[usize]) -> bool {
    if left.len() != 2 {
        return false;
    }
    let d = left[1];
    right == [d] || right == [1, d]
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn adjoint(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].adjoint
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let adjoint = Tensor::zeros(&value.shape);
        self.nodes.push(Node { op, value, adjoint });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf; its adjoint is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: true }, value)
    }

    /// A non-trainable leaf (inputs, labels, frozen statistics).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: false }, value)
    }

    /// Generic forward entry point: applies `kind` to `inputs` and records the
    /// node for the backward sweep.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(AutodiffError::Arity {
                op: kind.name(),
                expected: kind.arity(),
                actual: inputs.len(),
            });
        }
        let x = inputs[0];
        match kind {
            OpKind::MatMul => self.matmul(x, inputs[1]),
            OpKind::Add => self.add(x, inputs[1]),
            OpKind::Sub => self.sub(x, inputs[1]),
            OpKind::Mul => self.mul(x, inputs[1]),
            OpKind::Relu => Ok(self.relu(x)),
            OpKind::Sigmoid => Ok(self.sigmoid(x)),
            OpKind::Softplus => Ok(self.softplus(x)),
            OpKind::Square => Ok(self.square(x)),
            OpKind::Sum => Ok(self.sum(x)),
            OpKind::Mean => Ok(self.mean(x)),
            OpKind::Scale(c) => Ok(self.scale(x, c)),
            OpKind::GradientReversal => Ok(self.gradient_reversal(x)),
            OpKind::Standardize { eps } => self.standardize(x, eps),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let value = matmul_values(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.shape == tb.shape {
            false
        } else if row_broadcast(&ta.shape, &tb.shape) {
            true
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        };
        let data = if broadcast {
            let d = tb.len();
            ta.data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data[i % d]))
                .collect()
        } else {
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok((
            Tensor {
                shape: ta.shape.clone(),
                data,
            },
            broadcast,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (value, bc) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b, bc), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (value, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b, bc), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (value, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b, bc), value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus);
        self.push(Op::Softplus(x), value)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| c * v);
        self.push(Op::Scale(x, c), value)
    }

    /// Identity forward; multiplies the incoming adjoint by −1 on the way back.
    pub fn gradient_reversal(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(Op::Reverse(x), value)
    }

    pub fn standardize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape.len() != 2 || t.shape[0] < 2 {
            return Err(AutodiffError::InvalidShape {
                op: "standardize",
                shape: t.shape.clone(),
                reason: "needs a matrix with at least two rows",
            });
        }
        let (n, d) = (t.shape[0], t.shape[1]);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(t.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / n as f64 + eps).sqrt())
            .collect();
        let data = t
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % d]) * inv_std[i % d])
            .collect();
        let value = Tensor {
            shape: vec![n, d],
            data,
        };
        Ok(self.push(Op::Standardize { input: x, inv_std }, value))
    }

    /// Reverse sweep from a scalar `loss`. All adjoints are zeroed first, so
    /// calling this repeatedly on the same graph is safe.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.value(loss).shape.clone()));
        }
        for node in &mut self.nodes {
            node.adjoint.data.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].adjoint.data[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.adjoint.data.iter().all(|&g| g == 0.0) {
                continue;
            }
            propagate(before, node);
        }

        let entries = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_param())
            .map(|(i, n)| (NodeId(i), n.adjoint.clone()))
            .collect();
        Ok(Gradients { entries })
    }
}

/// Accumulates `node`'s adjoint into its parents, all of which live in `before`.
fn propagate(before: &mut [Node], node: &Node) {
    let g = &node.adjoint.data;
    match &node.op {
        Op::Leaf { .. } => {}
        Op::MatMul(a, b) => {
            // dA = G Bᵀ, dB = Aᵀ G
            let (n, k) = (before[a.0].value.shape[0], before[a.0].value.shape[1]);
            let m = before[b.0].value.shape[1];
            let bval = before[b.0].value.data.clone();
            let aval = before[a.0].value.data.clone();
            {
                let da = &mut before[a.0].adjoint.data;
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bval[p * m..(p + 1) * m];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            let db = &mut before[b.0].adjoint.data;
            for i in 0..n {
                let grow = &g[i * m..(i + 1) * m];
                for p in 0..k {
                    let av = aval[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                        *d += av * gv;
                    }
                }
            }
        }
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (d, &gv) in before[a.0].adjoint.data.iter_mut().zip(g) {
                *d += gv;
            }
            let db = &mut before[b.0].adjoint.data;
            if *bc {
                let d = db.len();
                for (i, &gv) in g.iter().enumerate() {
                    db[i % d] += sign * gv;
                }
            } else {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += sign * gv;
                }
            }
        }
        Op::Mul(a, b, bc) => {
            let aval = before[a.0].value.data.clone();
            let bval = before[b.0].value.data.clone();
            let d = bval.len();
            {
                let da = &mut before[a.0].adjoint.data;
                for (i, &gv) in g.iter().enumerate() {
                    let bv = if *bc { bval[i % d] } else { bval[i] };
                    da[i] += gv * bv;
                }
            }
            let db = &mut before[b.0].adjoint.data;
            for (i, &gv) in g.iter().enumerate() {
                let j = if *bc { i % d } else { i };
                db[j] += gv * aval[i];
            }
        }
        Op::Relu(x) => {
            let p = &mut before[x.0];
            for ((d, &v), &gv) in p.adjoint.data.iter_mut().zip(&p.value.data).zip(g) {
                if v > 0.0 {
                    *d += gv;
                }
            }
        }
        Op::Sigmoid(x) => {
            let p = &mut before[x.0];
            for ((d, &s), &gv) in p.adjoint.data.iter_mut().zip(&node.value.data).zip(g) {
                *d += gv * s * (1.0 - s);
            }
        }
        Op::Softplus(x) => {
            let p = &mut before[x.0];
            for ((d, &v), &gv) in p.adjoint.data.iter_mut().zip(&p.value.data).zip(g) {
                *d += gv * sigmoid(v);
            }
        }
        Op::Square(x) => {
            let p = &mut before[x.0];
            for ((d, &v), &gv) in p.adjoint.data.iter_mut().zip(&p.value.data).zip(g) {
                *d += gv * 2.0 * v;
            }
        }
        Op::Sum(x) => {
            let gv = g[0];
            before[x.0].adjoint.data.iter_mut().for_each(|d| *d += gv);
        }
        Op::Mean(x) => {
            let p = &mut before[x.0];
            let gv = g[0] / p.value.len() as f64;
            p.adjoint.data.iter_mut().for_each(|d| *d += gv);
        }
        Op::Scale(x, c) => {
            for (d, &gv) in before[x.0].adjoint.data.iter_mut().zip(g) {
                *d += c * gv;
            }
        }
        Op::Reverse(x) => {
            for (d, &gv) in before[x.0].adjoint.data.iter_mut().zip(g) {
                *d -= gv;
            }
        }
        Op::Standardize { input, inv_std } => {
            // dx = inv_std / n * (n g - sum(g) - xhat * sum(g * xhat)), per column
            let (n, dim) = (node.value.shape[0], node.value.shape[1]);
            let xhat = &node.value.data;
            let mut sum_g = vec![0.0; dim];
            let mut sum_gx = vec![0.0; dim];
            for (i, (&gv, &xv)) in g.iter().zip(xhat).enumerate() {
                sum_g[i % dim] += gv;
                sum_gx[i % dim] += gv * xv;
            }
            let nf = n as f64;
            let dx = &mut before[input.0].adjoint.data;
            for (i, (&gv, &xv)) in g.iter().zip(xhat).enumerate() {
                let j = i % dim;
                dx[i] += inv_std[j] / nf * (nf * gv - sum_g[j] - xv * sum_gx[j]);
            }
        }
    }
}
