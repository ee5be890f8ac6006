//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one
//! [`DiffNode`] whose parents precede it, so the tape order is a topological
//! order and [`Graph::backward`] walks it once in reverse.
//!
//! Trainable weights live outside the tape in [`Parameter`]s. Binding a
//! parameter copies its value into a leaf; after a backward pass the leaf
//! gradient is added into [`Parameter::grad`] with [`Graph::accumulate_grad`]
//! (or [`collect_grads`] for a whole [`Module`]). Leaves created with
//! [`Graph::constant`] or [`Graph::detach`] never receive gradient.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::math;
use crate::matrix::{matmul_at_acc, matmul_bt_acc, Matrix};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    LeakyRelu,
    SubFromOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Mul,
    Add,
    Sub,
}

/// Which primitive produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    MatMul,
    Concat,
    Unary(Unary),
    Binary(Binary),
    Softmax,
    AddColumn,
    Clamp,
    Sum,
    Mean,
    Scale,
    SelectCols,
    AssembleCols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Unary(Unary, NodeId),
    Binary(Binary, NodeId, NodeId),
    Softmax(NodeId),
    AddColumn(NodeId, NodeId),
    Clamp(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    SelectCols(NodeId, Vec<usize>),
    AssembleCols(Vec<(NodeId, Vec<usize>)>),
}

#[derive(Debug, Clone)]
pub struct DiffNode {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

impl DiffNode {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    /// Gradient from the most recent backward pass; `None` for nodes that do
    /// not lead to any trainable leaf.
    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn op_tag(&self) -> OpTag {
        match &self.op {
            Op::Leaf => OpTag::Leaf,
            Op::MatMul(..) => OpTag::MatMul,
            Op::Concat(..) => OpTag::Concat,
            Op::Unary(k, _) => OpTag::Unary(*k),
            Op::Binary(k, ..) => OpTag::Binary(*k),
            Op::Softmax(_) => OpTag::Softmax,
            Op::AddColumn(..) => OpTag::AddColumn,
            Op::Clamp(..) => OpTag::Clamp,
            Op::Sum(_) => OpTag::Sum,
            Op::Mean(_) => OpTag::Mean,
            Op::Scale(..) => OpTag::Scale,
            Op::SelectCols(..) => OpTag::SelectCols,
            Op::AssembleCols(_) => OpTag::AssembleCols,
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match &self.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Concat(a, b)
            | Op::Binary(_, a, b)
            | Op::AddColumn(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Softmax(a)
            | Op::Clamp(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::SelectCols(a, _) => vec![*a],
            Op::AssembleCols(parts) => parts.iter().map(|(id, _)| *id).collect(),
        }
    }
}

/// A named weight matrix with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    id: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            id: id.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns an ordered list of parameters.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

/// Binds every parameter of `module` into `g`, in `parameters()` order.
/// With `live == false` the leaves are constants.
pub fn bind<M: Module + ?Sized>(g: &mut Graph, module: &M, live: bool) -> Vec<NodeId> {
    module
        .parameters()
        .into_iter()
        .map(|p| g.param(p, live))
        .collect()
}

/// Adds the gradients of leaves produced by [`bind`] into the module.
pub fn collect_grads<M: Module + ?Sized>(g: &Graph, ids: &[NodeId], module: &mut M) {
    for (id, p) in ids.iter().zip(module.parameters_mut()) {
        g.accumulate_grad(*id, p);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<DiffNode>,
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

    pub fn node(&self, id: NodeId) -> &DiffNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(DiffNode {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf holding a copy of the parameter; differentiable only when the
    /// parameter is trainable and `live` is set.
    pub fn param(&mut self, p: &Parameter, live: bool) -> NodeId {
        self.push(p.value.clone(), Op::Leaf, live && p.trainable)
    }

    /// Same value, no parents: gradient never flows past this node.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Stacks `a` on top of `b`. Both must have the same number of columns
    /// (one column for plain vectors, `B` for a batch).
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::Shape {
                op: "concat",
                left: sa,
                right: sb,
            });
        }
        let mut data = Vec::with_capacity((sa.0 + sb.0) * sa.1);
        data.extend_from_slice(self.value(a).as_slice());
        data.extend_from_slice(self.value(b).as_slice());
        let v = Matrix::from_vec(sa.0 + sb.0, sa.1, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Concat(a, b), rg))
    }

    pub fn unary(&mut self, kind: Unary, x: NodeId) -> NodeId {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => math::sigmoid,
            Unary::Tanh => math::tanh,
            Unary::LeakyRelu => |v| if v > 0.0 { v } else { LEAKY_SLOPE * v },
            Unary::SubFromOne => |v| 1.0 - v,
        };
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, Op::Unary(kind, x), rg)
    }

    pub fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op: "elementwise",
                left: sa,
                right: sb,
            });
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Mul => |x, y| x * y,
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
        };
        let data = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let v = Matrix::from_vec(sa.0, sa.1, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Binary(kind, a, b), rg))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Tanh, x)
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::LeakyRelu, x)
    }

    pub fn sub_from_one(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::SubFromOne, x)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    /// Softmax down each column, with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if rows == 0 {
            return Err(contract("softmax over an empty vector"));
        }
        let xv = self.value(x);
        let mut v = Matrix::zeros(rows, cols);
        for c in 0..cols {
            let max = (0..rows).map(|r| xv.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in 0..rows {
                let e = math::exp(xv.get(r, c) - max);
                v.set(r, c, e);
                total += e;
            }
            for r in 0..rows {
                v.set(r, c, v.get(r, c) / total);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    /// `x [m x B] + b [m x 1]`, broadcasting `b` over columns.
    pub fn add_column(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb != (sx.0, 1) {
            return Err(Error::Shape {
                op: "add_column",
                left: sx,
                right: sb,
            });
        }
        let mut v = self.value(x).clone();
        let bv = self.value(b).as_slice().to_vec();
        for r in 0..sx.0 {
            for c in 0..sx.1 {
                v.set(r, c, v.get(r, c) + bv[r]);
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddColumn(x, b), rg))
    }

    /// Clamps entries to `[-limit, limit]`; gradient passes only where the
    /// input was strictly inside.
    pub fn clamp(&mut self, x: NodeId, limit: f64) -> NodeId {
        let v = self.value(x).map(|v| v.clamp(-limit, limit));
        let rg = self.rg(x);
        self.push(v, Op::Clamp(x, limit), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).as_slice().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Matrix::column(&[s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(contract("mean of an empty matrix"));
        }
        let s = self.value(x).as_slice().iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        Ok(self.push(Matrix::column(&[s]), Op::Mean(x), rg))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, k), rg)
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, n) = xv.shape();
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(contract(alloc::format!(
                "select_cols: column {bad} out of range for width {n}"
            )));
        }
        let mut v = Matrix::zeros(rows, cols.len());
        for r in 0..rows {
            for (j, &c) in cols.iter().enumerate() {
                v.set(r, j, xv.get(r, c));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::SelectCols(x, cols.to_vec()), rg))
    }

    /// Inverse of [`Graph::select_cols`]: each part supplies the listed
    /// output columns. Every one of the `width` columns must be written
    /// exactly once.
    pub fn assemble_cols(&mut self, parts: &[(NodeId, &[usize])], width: usize) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |(id, _)| self.shape(*id).0);
        let mut seen = vec![false; width];
        let mut v = Matrix::zeros(rows, width);
        for (id, cols) in parts {
            let pv = self.value(*id);
            if pv.shape() != (rows, cols.len()) {
                return Err(Error::Shape {
                    op: "assemble_cols",
                    left: (rows, cols.len()),
                    right: pv.shape(),
                });
            }
            for (j, &c) in cols.iter().enumerate() {
                if c >= width || seen[c] {
                    return Err(contract("assemble_cols: columns must partition the output"));
                }
                seen[c] = true;
                for r in 0..rows {
                    v.set(r, c, pv.get(r, j));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(contract("assemble_cols: columns must partition the output"));
        }
        let rg = parts.iter().any(|(id, _)| self.rg(*id));
        let owned = parts.iter().map(|(id, c)| (*id, c.to_vec())).collect();
        Ok(self.push(v, Op::AssembleCols(owned), rg))
    }

    /// Reverse pass from a `1 x 1` loss. Node gradients from any earlier pass
    /// are discarded first, so repeated calls give identical results.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(contract(alloc::format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Matrix::column(&[1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Removes the gradient accumulator of `id` (zero-filled if absent) so it
    /// can be written while other node values are borrowed.
    fn take_slot(&mut self, id: NodeId) -> Option<Matrix> {
        let n = &mut self.nodes[id.0];
        if !n.requires_grad {
            return None;
        }
        let (r, c) = n.value.shape();
        Some(n.grad.take().unwrap_or_else(|| Matrix::zeros(r, c)))
    }

    fn put_slot(&mut self, id: NodeId, slot: Option<Matrix>) {
        if let Some(s) = slot {
            self.nodes[id.0].grad = Some(s);
        }
    }

    fn propagate(&mut self, i: usize, g: &Matrix) {
        // Parent slots are taken out of the tape, filled, then put back.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let mut sa = self.take_slot(a);
                if let Some(s) = sa.as_mut() {
                    matmul_bt_acc(g, self.value(b), s);
                }
                self.put_slot(a, sa);
                let mut sb = self.take_slot(b);
                if let Some(s) = sb.as_mut() {
                    matmul_at_acc(self.value(a), g, s);
                }
                self.put_slot(b, sb);
            }
            Op::Concat(a, b) => {
                let split = self.shape(*a).0 * g.cols();
                let mut sa = self.take_slot(*a);
                if let Some(s) = sa.as_mut() {
                    for (d, v) in s.as_mut_slice().iter_mut().zip(&g.as_slice()[..split]) {
                        *d += v;
                    }
                }
                self.put_slot(*a, sa);
                let mut sb = self.take_slot(*b);
                if let Some(s) = sb.as_mut() {
                    for (d, v) in s.as_mut_slice().iter_mut().zip(&g.as_slice()[split..]) {
                        *d += v;
                    }
                }
                self.put_slot(*b, sb);
            }
            Op::Unary(kind, x) => {
                let mut sx = self.take_slot(*x);
                if let Some(s) = sx.as_mut() {
                    let out = &self.nodes[i].value;
                    let xv = self.value(*x);
                    let it = s
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(out.as_slice().iter().zip(xv.as_slice()));
                    for ((d, &gv), (&y, &xin)) in it {
                        let local = match kind {
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Tanh => 1.0 - y * y,
                            Unary::LeakyRelu => {
                                if xin > 0.0 {
                                    1.0
                                } else {
                                    LEAKY_SLOPE
                                }
                            }
                            Unary::SubFromOne => -1.0,
                        };
                        *d += gv * local;
                    }
                }
                self.put_slot(*x, sx);
            }
            Op::Binary(kind, a, b) => {
                let (kind, a, b) = (*kind, *a, *b);
                let mut sa = self.take_slot(a);
                if let Some(s) = sa.as_mut() {
                    let bv = self.value(b).as_slice();
                    for (k, d) in s.as_mut_slice().iter_mut().enumerate() {
                        *d += match kind {
                            Binary::Mul => g.as_slice()[k] * bv[k],
                            Binary::Add | Binary::Sub => g.as_slice()[k],
                        };
                    }
                }
                self.put_slot(a, sa);
                let mut sb = self.take_slot(b);
                if let Some(s) = sb.as_mut() {
                    let av = self.value(a).as_slice();
                    for (k, d) in s.as_mut_slice().iter_mut().enumerate() {
                        *d += match kind {
                            Binary::Mul => g.as_slice()[k] * av[k],
                            Binary::Add => g.as_slice()[k],
                            Binary::Sub => -g.as_slice()[k],
                        };
                    }
                }
                self.put_slot(b, sb);
            }
            Op::Softmax(x) => {
                let mut sx = self.take_slot(*x);
                if let Some(s) = sx.as_mut() {
                    let y = &self.nodes[i].value;
                    let (rows, cols) = y.shape();
                    for c in 0..cols {
                        let dot: f64 = (0..rows).map(|r| g.get(r, c) * y.get(r, c)).sum();
                        for r in 0..rows {
                            let d = y.get(r, c) * (g.get(r, c) - dot);
                            s.set(r, c, s.get(r, c) + d);
                        }
                    }
                }
                self.put_slot(*x, sx);
            }
            Op::AddColumn(x, b) => {
                let mut sx = self.take_slot(*x);
                if let Some(s) = sx.as_mut() {
                    s.add_assign(g);
                }
                self.put_slot(*x, sx);
                let mut sb = self.take_slot(*b);
                if let Some(s) = sb.as_mut() {
                    for r in 0..g.rows() {
                        let row: f64 = (0..g.cols()).map(|c| g.get(r, c)).sum();
                        s.set(r, 0, s.get(r, 0) + row);
                    }
                }
                self.put_slot(*b, sb);
            }
            Op::Clamp(x, limit) => {
                let mut sx = self.take_slot(*x);
                if let Some(s) = sx.as_mut() {
                    let xv = self.value(*x).as_slice();
                    for ((d, &gv), &xin) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(xv) {
                        if xin.abs() < *limit {
                            *d += gv;
                        }
                    }
                }
                self.put_slot(*x, sx);
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let k = match op {
                    Op::Mean(_) => g.as_slice()[0] / n,
                    _ => g.as_slice()[0],
                };
                let mut sx = self.take_slot(*x);
                if let Some(s) = sx.as_mut() {
                    s.as_mut_slice().iter_mut().for_each(|d| *d += k);
                }
                self.put_slot(*x, sx);
            }
            Op::Scale(x, f) => {
                let mut sx = self.take_slot(*x);
                if let Some(s) = sx.as_mut() {
                    for (d, &gv) in s.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *d += gv * f;
                    }
                }
                self.put_slot(*x, sx);
            }
            Op::SelectCols(x, cols) => {
                let mut sx = self.take_slot(*x);
                if let Some(s) = sx.as_mut() {
                    for r in 0..g.rows() {
                        for (j, &c) in cols.iter().enumerate() {
                            s.set(r, c, s.get(r, c) + g.get(r, j));
                        }
                    }
                }
                self.put_slot(*x, sx);
            }
            Op::AssembleCols(parts) => {
                for (id, cols) in parts {
                    let mut sp = self.take_slot(*id);
                    if let Some(s) = sp.as_mut() {
                        for r in 0..g.rows() {
                            for (j, &c) in cols.iter().enumerate() {
                                s.set(r, j, s.get(r, j) + g.get(r, c));
                            }
                        }
                    }
                    self.put_slot(*id, sp);
                }
            }
        }
        self.nodes[i].op = op;
    }

    /// Adds the gradient of a bound leaf into `p.grad`. Non-trainable
    /// parameters and leaves without gradient are left untouched.
    pub fn accumulate_grad(&self, leaf: NodeId, p: &mut Parameter) {
        if !p.trainable {
            return;
        }
        if let Some(g) = &self.nodes[leaf.0].grad {
            p.grad.add_assign(g);
        }
    }
}

/// Encodes parameters in the `RCOMv1` snapshot layout: the magic bytes, then
/// per parameter a `u32` id length, the UTF-8 id, `u32` rows, `u32` cols and
/// the row-major values as little-endian `f64`.
pub fn encode_snapshot<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> Vec<u8> {
    let mut out = Vec::from(SNAPSHOT_MAGIC.as_slice());
    for p in params {
        out.extend_from_slice(&(p.id.len() as u32).to_le_bytes());
        out.extend_from_slice(p.id.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub const SNAPSHOT_MAGIC: &[u8; 6] = b"RCOMv1";

/// Decodes an `RCOMv1` snapshot into `(id, value)` pairs, in file order.
pub fn decode_snapshot(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let bad = |what: &str| contract(alloc::format!("malformed snapshot: {what}"));
    let mut cur = bytes
        .strip_prefix(SNAPSHOT_MAGIC.as_slice())
        .ok_or_else(|| bad("missing RCOMv1 magic"))?;
    fn take<'b>(cur: &mut &'b [u8], n: usize) -> Option<&'b [u8]> {
        if cur.len() < n {
            return None;
        }
        let (head, tail) = cur.split_at(n);
        *cur = tail;
        Some(head)
    }
    let u32_at = |cur: &mut &[u8]| take(cur, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize);
    let mut out = Vec::new();
    while !cur.is_empty() {
        let len = u32_at(&mut cur).ok_or_else(|| bad("truncated"))?;
        let id = take(&mut cur, len).ok_or_else(|| bad("truncated"))?;
        let id = core::str::from_utf8(id).map_err(|_| bad("id is not UTF-8"))?.into();
        let rows = u32_at(&mut cur).ok_or_else(|| bad("truncated"))?;
        let cols = u32_at(&mut cur).ok_or_else(|| bad("truncated"))?;
        let raw = take(&mut cur, rows * cols * 8).ok_or_else(|| bad("truncated"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((id, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(out)
}
