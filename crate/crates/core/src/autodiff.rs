//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass as an
//! append-only list of nodes, so node inputs always precede the node itself.
//! [`Tape::backward`] walks the list once in reverse and returns the gradient
//! of a scalar with respect to every node that requires one.
//!
//! Trainable parameters live in a [`ParamStore`] outside the tape. A tape
//! borrows the store, turns each parameter it reads into a leaf node, and
//! [`Gradients::accumulate_into`] adds the leaf gradients into a [`Grads`]
//! buffer. Several backward passes over the same tape therefore accumulate,
//! which is how two losses with different parameter scopes are routed within
//! one optimizer step.
//!
//! [`Tape::detach`] copies a value into a constant node with no inputs; any
//! leaf reachable only through it receives exactly zero gradient.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
pub struct Param {
    name: String,
    value: Tensor,
    reads: AtomicU64,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Owner of every trainable parameter, in construction order.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    reads: AtomicU64::new(0),
                })
                .collect(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            reads: AtomicU64::new(0),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// How many times a tape has read this parameter since the last reset.
    pub fn reads(&self, id: ParamId) -> u64 {
        self.params[id.0].reads.load(Ordering::Relaxed)
    }

    pub fn reset_reads(&self) {
        for p in &self.params {
            p.reads.store(0, Ordering::Relaxed);
        }
    }

    fn record_read(&self, id: ParamId) {
        self.params[id.0].reads.fetch_add(1, Ordering::Relaxed);
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn is_zero(&self, id: ParamId) -> bool {
        self.data[id.0].iter().all(|&x| x == 0.0)
    }

    fn add(&mut self, id: ParamId, g: &[f64]) {
        for (acc, x) in self.data[id.0].iter_mut().zip(g) {
            *acc += x;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, bias: bool },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sigmoid(Var),
    Relu(Var),
    LogSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SegmentMean { x: Var, offsets: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    MaxRows { x: Var, argmax: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Embedding { .. } => "embedding",
            Op::SegmentMean { .. } => "segment_mean",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

/// Names of all differentiable primitives, in the order the gradient checker
/// reports them.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "mul",
    "scale",
    "sigmoid",
    "relu",
    "log_softmax",
    "embedding",
    "segment_mean",
    "repeat_rows",
    "max_rows",
    "gather",
    "sum",
    "mean",
    "detach",
];

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    finite: bool,
}

/// Reverse-mode gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` when the node does not lie
    /// on a differentiable path to the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializes zeros.
    pub fn get_or_zero(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    pub fn accumulate_into(&self, grads: &mut Grads) {
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                grads.add(id, g);
            }
        }
    }
}

pub struct Tape<'a> {
    params: Option<&'a ParamStore>,
    param_nodes: HashMap<ParamId, Var>,
    nodes: Vec<Node<'a>>,
    fault: Option<(&'static str, f64)>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// A tape with no parameter store; only constants and inputs.
    pub fn new() -> Self {
        Self {
            params: None,
            param_nodes: HashMap::new(),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_params(params: &'a ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Scales the input gradient of every `op` node by `factor` during
    /// backward. Only used to check that the gradient checker notices a
    /// broken derivative.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    /// Parameters read by this tape, in id order.
    pub fn touched_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.param_nodes.keys().copied().collect();
        ids.sort_unstable();
        ids
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Whether `v` is linked to any differentiable input.
    pub fn is_attached(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        let finite = value.is_finite();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    fn check_finite(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        if inputs.iter().all(|v| self.nodes[v.0].finite) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// A constant leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "constant" });
        }
        Ok(self.push(Cow::Owned(value), Op::Constant, false))
    }

    /// A differentiable leaf not backed by the parameter store.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "input" });
        }
        Ok(self.push(Cow::Owned(value), Op::Input, true))
    }

    /// Leaf node reading a stored parameter. Repeated reads of the same
    /// parameter on one tape share a node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        store.record_read(id);
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param, true);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone().into_owned();
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    /// `a @ b` where `a` is `[.., k]` (leading dims flattened) and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ wᵀ` where `w` is stored `[n, k]`, the usual layout of a weight.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        self.matmul_impl(a, w, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check_finite("matmul", &[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.cols();
        let bs = bv.shape();
        let (bk, n) = match (bs.len(), trans_b) {
            (2, false) => (bs[0], bs[1]),
            (2, true) => (bs[1], bs[0]),
            _ => (usize::MAX, 0),
        };
        if bk != k {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Elementwise sum of equal shapes, or row-wise bias addition when `b`
    /// is one-dimensional with the length of `a`'s last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("add", &[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        let bias = if av.shape() == bv.shape() {
            false
        } else if bv.shape().len() == 1 && bv.len() == av.cols() {
            true
        } else {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let out: Vec<f64> = if bias {
            let c = bv.len();
            av.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv.data()[i % c])
                .collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect()
        };
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::Add { a, b, bias }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("mul", &[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_finite("scale", &[x])?;
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())?;
        Ok(self.push_op(value, Op::Scale { x, c }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: fn(Var) -> Op,
    ) -> Result<Var> {
        self.check_finite(name, &[x])?;
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push_op(value, op(x), &[x]))
    }

    /// Log-softmax over the last axis, computed as `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax", &[x])?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            out.extend(log_softmax_row(row));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::LogSoftmax(x), &[x]))
    }

    /// Rows of `table` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_finite("embedding", &[table])?;
        let tv = self.value(table);
        if tv.shape().len() != 2 || ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "embedding",
                shape: tv.shape().to_vec(),
                reason: "expected a 2-d table and at least one id".into(),
            });
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "token",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let ids = ids.to_vec();
        Ok(self.push_op(value, Op::Embedding { table, ids }, &[table]))
    }

    /// Mean of consecutive row segments: rows `offsets[i]..offsets[i+1]` of
    /// a `[T, d]` input become row `i` of the `[B, d]` output.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        self.check_finite("segment_mean", &[x])?;
        let xv = self.value(x);
        let bad = offsets.len() < 2
            || offsets[0] != 0
            || *offsets.last().unwrap() != xv.rows()
            || offsets.windows(2).any(|w| w[1] <= w[0]);
        if bad || xv.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "segment_mean",
                shape: xv.shape().to_vec(),
                reason: format!("bad segment offsets {offsets:?}"),
            });
        }
        let d = xv.cols();
        let b = offsets.len() - 1;
        let mut out = vec![0.0; b * d];
        for (s, w) in offsets.windows(2).enumerate() {
            let inv = 1.0 / (w[1] - w[0]) as f64;
            let dst = &mut out[s * d..(s + 1) * d];
            for r in w[0]..w[1] {
                for (o, v) in dst.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(vec![b, d], out)?;
        let offsets = offsets.to_vec();
        Ok(self.push_op(value, Op::SegmentMean { x, offsets }, &[x]))
    }

    /// Repeats each row of a `[B, d]` input `times` times: `[B, times, d]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        self.check_finite("repeat_rows", &[x])?;
        let xv = self.value(x);
        if xv.shape().len() != 2 || times == 0 {
            return Err(Error::InvalidShape {
                op: "repeat_rows",
                shape: xv.shape().to_vec(),
                reason: "expected [B, d] and times > 0".into(),
            });
        }
        let (b, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(b * times * d);
        for i in 0..b {
            for _ in 0..times {
                out.extend_from_slice(xv.row(i));
            }
        }
        let value = Tensor::new(vec![b, times, d], out)?;
        Ok(self.push_op(value, Op::RepeatRows { x, times }, &[x]))
    }

    /// Column-wise maximum over the rows of each group: `[B, g, d]` becomes
    /// `[B, d]`; a 2-d `[g, d]` input is one group and becomes `[1, d]`.
    /// Ties go to the lowest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("max_rows", &[x])?;
        let xv = self.value(x);
        let s = xv.shape();
        let (b, g, d) = match s.len() {
            3 => (s[0], s[1], s[2]),
            2 => (1, s[0], s[1]),
            _ => {
                return Err(Error::InvalidShape {
                    op: "max_rows",
                    shape: s.to_vec(),
                    reason: "expected [B, g, d] or [g, d]".into(),
                })
            }
        };
        let mut out = vec![0.0; b * d];
        let mut argmax = vec![0usize; b * d];
        for bi in 0..b {
            for j in 0..d {
                let mut best_r = bi * g;
                let mut best = xv.data()[best_r * d + j];
                for r in bi * g + 1..(bi + 1) * g {
                    let v = xv.data()[r * d + j];
                    if v > best {
                        best = v;
                        best_r = r;
                    }
                }
                out[bi * d + j] = best;
                argmax[bi * d + j] = best_r;
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        Ok(self.push_op(value, Op::MaxRows { x, argmax }, &[x]))
    }

    /// Picks `x[i, idx[i]]` from a `[B, A]` input (a vector is one row),
    /// giving `[B]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check_finite("gather", &[x])?;
        let xv = self.value(x);
        let a = xv.cols();
        if xv.rows() != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: xv.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= a {
                return Err(Error::IndexOutOfRange {
                    what: "answer",
                    index: j,
                    size: a,
                });
            }
            out.push(xv.data()[i * a + j]);
        }
        let value = Tensor::vector(out);
        let idx = idx.to_vec();
        Ok(self.push_op(value, Op::Gather { x, idx }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_finite("sum", &[x])?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push_op(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_finite("mean", &[x])?;
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push_op(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-softmax
    /// of `logits`; the cross-entropy of a batch.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let logp = self.log_softmax(logits)?;
        let picked = self.gather(logp, targets)?;
        let m = self.mean(picked)?;
        self.scale(m, -1.0)
    }

    /// Gradients of the scalar `loss` with respect to every node on a
    /// differentiable path to it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotDifferentiable(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::NotDifferentiable(
                "loss is detached from every differentiable input".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self.param_nodes.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `grads`.
    pub fn backward_into(&self, loss: Var, grads: &mut Grads) -> Result<Gradients> {
        let g = self.backward(loss)?;
        g.accumulate_into(grads);
        Ok(g)
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let factor = match self.fault {
            Some((name, f)) if name == node.op.name() => f,
            _ => 1.0,
        };
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let delta = if factor != 1.0 {
                delta.into_iter().map(|d| d * factor).collect()
            } else {
                delta
            };
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let k = av.cols();
                let m = av.rows();
                let n = node.value.cols();
                if self.nodes[a.0].requires_grad {
                    // dA = dC · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), !trans_b, &mut da);
                    send(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    if trans_b {
                        // dW[n,k] = dCᵀ · A
                        gemm(n, m, k, g, true, av.data(), false, &mut db);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        gemm(k, m, n, av.data(), true, g, false, &mut db);
                    }
                    send(b, db);
                }
            }
            &Op::Add { a, b, bias } => {
                send(a, g.to_vec());
                if bias {
                    let c = val(b).len();
                    let mut db = vec![0.0; c];
                    for (i, x) in g.iter().enumerate() {
                        db[i % c] += x;
                    }
                    send(b, db);
                } else {
                    send(b, g.to_vec());
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                send(a, g.iter().zip(bv.data()).map(|(g, y)| g * y).collect());
                send(b, g.iter().zip(av.data()).map(|(g, x)| g * x).collect());
            }
            &Op::Scale { x, c } => send(x, g.iter().map(|g| g * c).collect()),
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                send(x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            &Op::Relu(x) => {
                let xv = val(x).data();
                send(
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            &Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        dxr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                send(x, dx);
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                send(*table, dt);
            }
            Op::SegmentMean { x, offsets } => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (s, w) in offsets.windows(2).enumerate() {
                    let inv = 1.0 / (w[1] - w[0]) as f64;
                    for r in w[0]..w[1] {
                        for j in 0..d {
                            dx[r * d + j] = g[s * d + j] * inv;
                        }
                    }
                }
                send(*x, dx);
            }
            &Op::RepeatRows { x, times } => {
                let d = node.value.cols();
                let b = val(x).rows();
                let mut dx = vec![0.0; b * d];
                for i in 0..b {
                    for t in 0..times {
                        let src = &g[(i * times + t) * d..(i * times + t + 1) * d];
                        for (o, v) in dx[i * d..(i + 1) * d].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                send(x, dx);
            }
            Op::MaxRows { x, argmax } => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (o, &r) in argmax.iter().enumerate() {
                    dx[r * d + o % d] += g[o];
                }
                send(*x, dx);
            }
            Op::Gather { x, idx } => {
                let xv = val(*x);
                let a = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * a + j] = g[i];
                }
                send(*x, dx);
            }
            &Op::Sum(x) => send(x, vec![g[0]; val(x).len()]),
            &Op::Mean(x) => {
                let n = val(x).len();
                send(x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - max - lse).collect()
}

/// `c += op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape
/// `k×n`; a transposed operand is stored with its dimensions swapped.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn log_softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3])).unwrap();
        let y = tape.log_softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1e4, -1e4, 0.0, 9999.0])).unwrap();
        let y = tape.log_softmax(x).unwrap();
        assert!(tape.value(y).is_finite());
        assert!(tape.value(y).data()[0] > -1.0);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = tape.constant(t2(&[&[5.0], &[6.0]])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_t_matches_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let w = tape.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0], &[1.0, 0.0]])).unwrap();
        let c = tape.matmul_t(a, w).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 23.0, 1.0, 39.0, 53.0, 3.0]);
    }

    #[test]
    fn shape_errors_name_the_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut tape = Tape::new();
        assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
        let a = tape.constant(Tensor::scalar(1e300)).unwrap();
        let b = tape.scale(a, 1e300).unwrap();
        assert!(matches!(tape.sigmoid(b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn mean_of_product_gradient() {
        let av = Tensor::vector(vec![1.0, -2.0, 0.5, 4.0]);
        let bv = Tensor::vector(vec![3.0, 0.25, -1.0, 2.0]);
        let mut tape = Tape::new();
        let a = tape.input(av).unwrap();
        let b = tape.constant(bv.clone()).unwrap();
        let p = tape.mul(a, b).unwrap();
        let m = tape.mean(p).unwrap();
        let g = tape.backward(m).unwrap();
        let expect: Vec<f64> = bv.data().iter().map(|v| v / 4.0).collect();
        assert_eq!(g.get(a).unwrap(), expect.as_slice());
    }

    #[test]
    fn reuse_accumulates() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0)).unwrap();
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = tape.input(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let d = tape.detach(x);
        assert!(!tape.requires_grad(d));
        let p = tape.mul(d, y).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get_or_zero(x, 2), vec![0.0, 0.0]);
        assert_eq!(g.get(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_detached_or_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
        let s = tape.sum(x).unwrap();
        let d = tape.detach(s);
        assert!(matches!(tape.backward(d), Err(Error::NotDifferentiable(_))));
    }

    #[test]
    fn max_rows_ties_go_to_lowest_row() {
        let mut tape = Tape::new();
        let x = tape.input(t2(&[&[1.0, 5.0], &[1.0, 2.0], &[0.0, 5.0]])).unwrap();
        let m = tape.max_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 5.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn params_accumulate_across_backward_calls() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![2.0]));
        let mut grads = Grads::zeros_like(&store);
        let mut tape = Tape::with_params(&store);
        let x = tape.param(w);
        let y = tape.mul(x, x).unwrap();
        let l1 = tape.sum(y).unwrap();
        let l2 = tape.sum(x).unwrap();
        tape.backward_into(l1, &mut grads).unwrap();
        tape.backward_into(l2, &mut grads).unwrap();
        assert_eq!(grads.get(w), &[5.0]);
        assert_eq!(store.reads(w), 1);
    }

    #[test]
    fn corrupted_backward_changes_gradient() {
        let mut tape = Tape::new();
        tape.corrupt_backward("sigmoid", 1.5);
        let x = tape.input(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.375]);
    }
}
