//! Tape-based reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value; nodes are therefore in
//! topological order by construction. A graph serves exactly one forward
//! pass and one backward pass: gradient accumulators start at zero when the
//! graph is built and `backward` refuses to run twice.

use super::{axpy, dot, matmul_into, Element, Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Square,
}

impl ElementwiseOp {
    pub fn arity(self) -> usize {
        match self {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Sum(NodeId),
    SoftmaxRows(NodeId),
    ConcatRows(Vec<NodeId>),
    InterleaveCols(Vec<NodeId>),
    Reshape(NodeId),
    /// Fused scalar-valued function whose input gradients were computed
    /// during the forward pass.
    ScalarFn {
        inputs: Vec<NodeId>,
        local_grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Element = f64> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf. Names must be unique within a graph.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Argument(format!("parameter `{name}` registered twice")));
        }
        value.ensure_finite("param")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// Registers every tensor of `params` as a trainable leaf.
    pub fn register_params(&mut self, params: &super::ParamSet<T>) -> Result<()> {
        for (name, value) in params.iter() {
            self.param(name, value.clone())?;
        }
        Ok(())
    }

    /// Node of a registered parameter.
    pub fn param_id(&self, name: &str) -> Result<NodeId> {
        self.param_node(name)
            .ok_or_else(|| Error::Argument(format!("parameter `{name}` not registered")))
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SoftmaxRows(a)
            | Op::Reshape(a) => self.rg(*a),
            Op::ConcatRows(xs) | Op::InterleaveCols(xs) => xs.iter().any(|&x| self.rg(x)),
            Op::ScalarFn { inputs, .. } => inputs.iter().any(|&x| self.rg(x)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// `x · wᵀ` with `x: [M×K]`, `w: [N×K]`.
    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let v = self.value(x).matmul_nt(self.value(w))?;
        self.push(v, Op::MatMulNt(x, w), "matmul_nt")
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity() {
            return Err(Error::Argument(format!(
                "{op:?} takes {} inputs, got {}",
                op.arity(),
                inputs.len()
            )));
        }
        match op {
            ElementwiseOp::Add => self.add(inputs[0], inputs[1]),
            ElementwiseOp::Sub => self.sub(inputs[0], inputs[1]),
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseOp::Tanh => self.tanh(inputs[0]),
            ElementwiseOp::Sigmoid => self.sigmoid(inputs[0]),
            ElementwiseOp::Square => self.square(inputs[0]),
        }
    }

    fn binary(&self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            x.zip_map(y, name, f)
        } else if y.shape().is_empty() {
            let s = y.item();
            Ok(x.map(|v| f(v, s)))
        } else if x.shape().is_empty() {
            let s = x.item();
            Ok(y.map(|v| f(s, v)))
        } else {
            Err(Error::shape(name, x.shape(), y.shape()))
        }
    }

    /// Elementwise sum; one side may be a scalar (shape `[]`).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Adds vector `b: [C]` to every row of `x: [R×C]` (bias add).
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (r, c) = xv.dims2()?;
        if bv.shape() != [c] {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            for (o, &bj) in out[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *o = *o + bj;
            }
        }
        let v = Tensor::new([r, c], out)?;
        self.push(v, Op::AddRow(x, b), "add_row")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let f = T::of(factor);
        let v = self.value(a).map(|x| x * f);
        self.push(v, Op::Scale(a, factor), "scale")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), "square")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).softmax_rows()?;
        self.push(v, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows of nothing".into()))?;
        let (_, c) = self.value(first).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            let (r, c2) = v.dims2()?;
            if c2 != c {
                return Err(Error::shape("concat_rows", self.value(first).shape(), v.shape()));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let v = Tensor::new([rows, c], data)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Gathers `k` equally sized tensors into an `[n×k]` matrix whose row `i`
    /// is `(x₀[i], …, x_{k−1}[i])` in row-major element order.
    pub fn interleave_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("interleave_cols of nothing".into()))?;
        let shape = self.value(first).shape().to_vec();
        let n = self.value(first).len();
        let k = parts.len();
        let mut data = vec![T::zero(); n * k];
        for (j, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("interleave_cols", &shape, v.shape()));
            }
            for (i, &x) in v.data().iter().enumerate() {
                data[i * k + j] = x;
            }
        }
        let v = Tensor::new([n, k], data)?;
        self.push(v, Op::InterleaveCols(parts.to_vec()), "interleave_cols")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    /// Records a fused scalar function with precomputed input gradients.
    pub(crate) fn scalar_fn(&mut self, inputs: Vec<NodeId>, value: T, local_grads: Vec<Tensor<T>>) -> Result<NodeId> {
        debug_assert_eq!(inputs.len(), local_grads.len());
        for (&i, g) in inputs.iter().zip(&local_grads) {
            if self.shape(i) != g.shape() {
                return Err(Error::shape("scalar_fn", self.shape(i), g.shape()));
            }
        }
        self.push(Tensor::scalar(value), Op::ScalarFn { inputs, local_grads }, "scalar_fn")
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let val = |id: NodeId| &nodes[id.0].value;
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = Acc {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => leaf_grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = av.dims2()?;
                    let n = bv.dims2()?.1;
                    if acc.rg(*a) {
                        let da = g.matmul_nt(bv)?;
                        acc.add(*a, da);
                    }
                    if acc.rg(*b) {
                        // dB = Aᵀ·dC
                        let mut db = vec![T::zero(); k * n];
                        for r in 0..m {
                            let grow = &g.data()[r * n..(r + 1) * n];
                            for p in 0..k {
                                axpy(av.data()[r * k + p], grow, &mut db[p * n..(p + 1) * n]);
                            }
                        }
                        acc.add(*b, Tensor::new([k, n], db)?);
                    }
                }
                Op::MatMulNt(x, w) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (m, k) = xv.dims2()?;
                    let n = wv.dims2()?.0;
                    if acc.rg(*x) {
                        let mut dx = vec![T::zero(); m * k];
                        matmul_into(g.data(), wv.data(), &mut dx, m, n, k);
                        acc.add(*x, Tensor::new([m, k], dx)?);
                    }
                    if acc.rg(*w) {
                        // dW = dCᵀ·X
                        let mut dw = vec![T::zero(); n * k];
                        for r in 0..m {
                            let xrow = &xv.data()[r * k..(r + 1) * k];
                            for j in 0..n {
                                let gij = g.data()[r * n + j];
                                if gij != T::zero() {
                                    axpy(gij, xrow, &mut dw[j * k..(j + 1) * k]);
                                }
                            }
                        }
                        acc.add(*w, Tensor::new([n, k], dw)?);
                    }
                }
                Op::Add(a, b) => {
                    acc.add_broadcast(*a, &g, |g, _, _| g);
                    acc.add_broadcast(*b, &g, |g, _, _| g);
                }
                Op::Sub(a, b) => {
                    acc.add_broadcast(*a, &g, |g, _, _| g);
                    acc.add_broadcast(*b, &g, |g, _, _| -g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    // d(a·b)/da = b
                    acc.add_broadcast_with(a, b, &g, |g, other| g * other);
                    acc.add_broadcast_with(b, a, &g, |g, other| g * other);
                }
                Op::AddRow(x, b) => {
                    if acc.rg(*b) {
                        let (r, c) = g.dims2()?;
                        let mut db = vec![T::zero(); c];
                        for row in 0..r {
                            for (d, &v) in db.iter_mut().zip(&g.data()[row * c..(row + 1) * c]) {
                                *d = *d + v;
                            }
                        }
                        acc.add(*b, Tensor::new([c], db)?);
                    }
                    acc.add(*x, g);
                }
                Op::Scale(a, f) => {
                    let f = T::of(*f);
                    acc.add(*a, g.map(|v| v * f));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = g.zip_map(y, "tanh'", |g, y| g * (T::one() - y * y))?;
                    acc.add(*a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = g.zip_map(y, "sigmoid'", |g, y| g * y * (T::one() - y))?;
                    acc.add(*a, d);
                }
                Op::Square(a) => {
                    let two = T::of(2.0);
                    let d = g.zip_map(val(*a), "square'", |g, x| g * two * x)?;
                    acc.add(*a, d);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    acc.add(*a, Tensor::full(val(*a).shape(), s));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.dims2()?;
                    let mut d = vec![T::zero(); r * c];
                    for i in 0..r {
                        let (yr, gr) = (&y.data()[i * c..(i + 1) * c], &g.data()[i * c..(i + 1) * c]);
                        let inner = dot(yr, gr);
                        for j in 0..c {
                            d[i * c + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    acc.add(*a, Tensor::new([r, c], d)?);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if acc.rg(p) {
                            let part = Tensor::new(val(p).shape(), g.data()[offset..offset + n].to_vec())?;
                            acc.add(p, part);
                        }
                        offset += n;
                    }
                }
                Op::InterleaveCols(parts) => {
                    let k = parts.len();
                    for (j, &p) in parts.iter().enumerate() {
                        if acc.rg(p) {
                            let n = val(p).len();
                            let data = (0..n).map(|i| g.data()[i * k + j]).collect();
                            acc.add(p, Tensor::new(val(p).shape(), data)?);
                        }
                    }
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc.add(*a, g.reshape(shape)?);
                }
                Op::ScalarFn { inputs, local_grads } => {
                    let s = g.item();
                    for (&inp, lg) in inputs.iter().zip(local_grads) {
                        if acc.rg(inp) {
                            acc.add(inp, lg.map(|v| v * s));
                        }
                    }
                }
            }
        }

        let mut out = Gradients::new();
        for (name, id) in &self.params {
            let g = match leaf_grads.get_mut(id.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.shape(*id)),
            };
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            out.insert(name.clone(), g)?;
        }
        Ok(out)
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradient accumulator view used during the reverse sweep.
struct Acc<'a, T: Element> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Element> Acc<'_, T> {
    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn add(&mut self, id: NodeId, g: Tensor<T>) {
        if !self.rg(id) {
            return;
        }
        match &mut self.grads[id.0] {
            slot @ None => *slot = Some(g),
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
        }
    }

    /// Accumulates `f(g)` into `id`, reducing to a scalar when `id` was
    /// broadcast.
    fn add_broadcast(&mut self, id: NodeId, g: &Tensor<T>, f: impl Fn(T, usize, usize) -> T) {
        if !self.rg(id) {
            return;
        }
        let mapped: Vec<T> = g.data().iter().enumerate().map(|(i, &v)| f(v, i, 0)).collect();
        self.reduce_into(id, g.shape(), mapped);
    }

    /// Like `add_broadcast` for products: `f(g, other)` where `other` is the
    /// co-factor, itself possibly a broadcast scalar.
    fn add_broadcast_with(&mut self, id: NodeId, other: NodeId, g: &Tensor<T>, f: impl Fn(T, T) -> T) {
        if !self.rg(id) {
            return;
        }
        let o = self.val(other);
        let mapped: Vec<T> = if o.len() == g.len() {
            g.data().iter().zip(o.data()).map(|(&a, &b)| f(a, b)).collect()
        } else {
            let s = o.item();
            g.data().iter().map(|&a| f(a, s)).collect()
        };
        self.reduce_into(id, g.shape(), mapped);
    }

    fn reduce_into(&mut self, id: NodeId, gshape: &[usize], mapped: Vec<T>) {
        let target = self.val(id).shape().to_vec();
        let t = if target.as_slice() == gshape {
            Tensor::new(target, mapped).expect("gradient shape")
        } else {
            Tensor::scalar(mapped.into_iter().sum())
        };
        self.add(id, t);
    }
}
