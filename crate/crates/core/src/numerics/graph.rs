//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every node that requires one. A graph is single-threaded
//! (`!Sync`), but it owns all of its buffers, so independent graphs can be
//! built on separate threads against a shared, read-only [`ParamStore`].

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Result, SpilError};

use super::kernels;
use super::optim::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose(usize),
    Reshape(usize),
    BroadcastTo(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Softmax(usize),
    ReduceMax { input: usize, axis: usize, argmax: Vec<usize> },
    ReduceMean { input: usize, axis: usize },
    ReduceSum { input: usize, axis: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    IndexSelect { input: usize, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one call to [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` was reachable and
    /// requires a gradient.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("grad shape"))
    }

    /// Parameter gradients in import order, detached from the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g.clone())))
            .collect()
    }

    /// Adds (`+=`) every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index of the source element
/// of `in_shape` under numpy-style broadcasting.
fn broadcast_source_indices(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + offset] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(src);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            src += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Handle to the node at `index`, as returned by [`Var::index`].
    pub fn var(&self, index: usize) -> Var<'_> {
        assert!(index < self.len(), "node {index} out of range");
        Var { graph: self, id: index }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Imports a trainable parameter. Repeated imports of the same id return
    /// the same node, so its gradient accumulates over every use.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let var = self.input(store.value(id).clone());
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    pub fn value(&self, var: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[var.id].value)
    }

    fn unary(&self, x: Var<'_>, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&x.value());
        let rg = self.requires(&[x.id]);
        self.push(value, op, rg)
    }

    fn elementwise<'g>(
        &'g self,
        a: Var<'g>,
        b: Var<'g>,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let (sa, sb) = (a.shape(), b.shape());
        let (a, b) = if sa == sb {
            (a, b)
        } else {
            let shape = broadcast_shape(&sa, &sb).ok_or(SpilError::Shape {
                op: name,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })?;
            let a = if sa == shape { a } else { a.broadcast_to(&shape)? };
            let b = if sb == shape { b } else { b.broadcast_to(&shape)? };
            (a, b)
        };
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(value, make(a.id, b.id), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or(SpilError::EmptyInput("concat"))?.shape();
        if axis >= first.len() {
            return Err(SpilError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(SpilError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let value = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(out_shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(value, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(SpilError::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad || matches!(root.op, Op::Leaf) {
            return Err(SpilError::Backward(
                "loss is not connected to any differentiable input".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let wants = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &nodes[i].value;

            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k) = (va.shape()[va.rank() - 2], va.shape()[va.rank() - 1]);
                    let n = vb.shape()[vb.rank() - 1];
                    if vb.rank() == 2 {
                        let rows = va.numel() / k;
                        if wants(*a) {
                            let mut da = vec![0.0; va.numel()];
                            kernels::gemm_nt(&g, vb.data(), &mut da, rows, n, k);
                            add_into(&mut grads[*a], &da);
                        }
                        if wants(*b) {
                            let mut db = vec![0.0; vb.numel()];
                            kernels::gemm_tn(va.data(), &g, &mut db, rows, k, n);
                            add_into(&mut grads[*b], &db);
                        }
                    } else {
                        let batch = va.numel() / (m * k);
                        if wants(*a) {
                            let mut da = vec![0.0; va.numel()];
                            for bi in 0..batch {
                                kernels::gemm_nt(
                                    &g[bi * m * n..(bi + 1) * m * n],
                                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                                    &mut da[bi * m * k..(bi + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                            add_into(&mut grads[*a], &da);
                        }
                        if wants(*b) {
                            let mut db = vec![0.0; vb.numel()];
                            for bi in 0..batch {
                                kernels::gemm_tn(
                                    &va.data()[bi * m * k..(bi + 1) * m * k],
                                    &g[bi * m * n..(bi + 1) * m * n],
                                    &mut db[bi * k * n..(bi + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                            add_into(&mut grads[*b], &db);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let s = node.value.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let batch = node.value.numel() / (r * c);
                    let mut da = vec![0.0; g.len()];
                    for bi in 0..batch {
                        kernels::transpose(&g[bi * r * c..(bi + 1) * r * c], &mut da[bi * r * c..(bi + 1) * r * c], r, c);
                    }
                    add_into(&mut grads[*a], &da);
                }
                Op::Reshape(a) => add_into(&mut grads[*a], &g),
                Op::BroadcastTo(a) => {
                    let src = broadcast_source_indices(val(*a).shape(), node.value.shape());
                    let mut da = vec![0.0; val(*a).numel()];
                    for (gi, si) in g.iter().zip(src) {
                        da[si] += gi;
                    }
                    add_into(&mut grads[*a], &da);
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        add_into(&mut grads[*a], &g);
                    }
                    if wants(*b) {
                        add_into(&mut grads[*b], &g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        add_into(&mut grads[*a], &g);
                    }
                    if wants(*b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        add_into(&mut grads[*b], &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                        add_into(&mut grads[*a], &d);
                    }
                    if wants(*b) {
                        let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                        add_into(&mut grads[*b], &d);
                    }
                }
                Op::Div(a, b) => {
                    let vb = val(*b).data();
                    if wants(*a) {
                        let d: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g / y).collect();
                        add_into(&mut grads[*a], &d);
                    }
                    if wants(*b) {
                        let d: Vec<f64> = g
                            .iter()
                            .zip(node.value.data())
                            .zip(vb)
                            .map(|((g, q), y)| -g * q / y)
                            .collect();
                        add_into(&mut grads[*b], &d);
                    }
                }
                Op::Scale(a, c) => {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(&mut grads[*a], &d);
                }
                Op::Relu(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(&mut grads[*a], &d);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    add_into(&mut grads[*a], &d);
                }
                Op::Log(a) => {
                    let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                    add_into(&mut grads[*a], &d);
                }
                Op::Exp(a) => {
                    let d: Vec<f64> = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[*a], &d);
                }
                Op::Softmax(a) => {
                    let s = node.value.shape();
                    let last = s[s.len() - 1];
                    let y = node.value.data();
                    let mut d = vec![0.0; g.len()];
                    for r in 0..g.len() / last {
                        let span = r * last..(r + 1) * last;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(g, y)| g * y).sum();
                        for j in span {
                            d[j] = y[j] * (g[j] - dot);
                        }
                    }
                    add_into(&mut grads[*a], &d);
                }
                Op::ReduceMax { input, axis, argmax } => {
                    let (outer, len, inner) = split_axis(val(*input).shape(), *axis);
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let out_ix = o * inner + i;
                            d[(o * len + argmax[out_ix]) * inner + i] += g[out_ix];
                        }
                    }
                    add_into(&mut grads[*input], &d);
                }
                Op::ReduceMean { input, axis } | Op::ReduceSum { input, axis } => {
                    let (outer, len, inner) = split_axis(val(*input).shape(), *axis);
                    let scale = if matches!(node.op, Op::ReduceMean { .. }) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                d[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    add_into(&mut grads[*input], &d);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = val(inp).shape()[*axis];
                        if wants(inp) {
                            let mut d = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                d.extend_from_slice(&g[start..start + len * inner]);
                            }
                            add_into(&mut grads[inp], &d);
                        }
                        offset += len;
                    }
                }
                Op::IndexSelect { input, indices } => {
                    let vin = val(*input);
                    let row = vin.numel() / vin.shape()[0];
                    let mut d = vec![0.0; vin.numel()];
                    for (k, &ix) in indices.iter().enumerate() {
                        for c in 0..row {
                            d[ix * row + c] += g[k * row + c];
                        }
                    }
                    add_into(&mut grads[*input], &d);
                }
            }
        }

        let shapes = nodes[..=loss.id].iter().map(|n| n.value.shape().to_vec()).collect();
        let mut params: Vec<(ParamId, usize)> = self
            .params
            .borrow()
            .iter()
            .filter(|(_, &node)| node <= loss.id)
            .map(|(&p, &n)| (p, n))
            .collect();
        params.sort_by_key(|&(p, _)| p);
        Ok(Gradients { grads, shapes, params })
    }
}

impl<'g> Var<'g> {
    /// Position of this node in its graph.
    pub fn index(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(*self)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value as a constant leaf; gradients stop here.
    pub fn detach(&self) -> Var<'g> {
        let v = self.value().clone();
        self.graph.constant(v)
    }

    /// `[.., m, k] × [k, n]` (shared right operand) or `[B.., m, k] × [B.., k, n]`.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || SpilError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch());
        }
        if sb.len() > 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (va, vb) = (&nodes[self.id].value, &nodes[other.id].value);
            let mut out = vec![0.0; out_shape.iter().product()];
            if sb.len() == 2 {
                kernels::gemm_nn(va.data(), vb.data(), &mut out, va.numel() / k, k, n);
            } else {
                let batch = va.numel() / (m * k);
                for bi in 0..batch {
                    kernels::gemm_nn(
                        &va.data()[bi * m * k..(bi + 1) * m * k],
                        &vb.data()[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            Tensor::new(out_shape, out)?
        };
        let rg = self.graph.requires(&[self.id, other.id]);
        Ok(self.graph.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(SpilError::InvalidShape {
                op: "transpose",
                shape: s,
                reason: "rank < 2".into(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        Ok(self.graph.unary(*self, Op::Transpose(self.id), |t| {
            let mut out = vec![0.0; t.numel()];
            for bi in 0..t.numel() / (r * c) {
                kernels::transpose(&t.data()[bi * r * c..(bi + 1) * r * c], &mut out[bi * r * c..(bi + 1) * r * c], r, c);
            }
            let mut shape = s.clone();
            let len = shape.len();
            shape.swap(len - 2, len - 1);
            Tensor::new(shape, out).expect("transpose shape")
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::Reshape(self.id), rg))
    }

    /// Numpy-style broadcast to `shape`; the backward pass sums over
    /// expanded axes.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        let s = self.shape();
        if broadcast_shape(&s, shape).as_deref() != Some(shape) {
            return Err(SpilError::Shape {
                op: "broadcast_to",
                lhs: s,
                rhs: shape.to_vec(),
            });
        }
        let value = {
            let v = self.value();
            let src = broadcast_source_indices(&s, shape);
            let data = src.into_iter().map(|i| v.data()[i]).collect();
            Tensor::new(shape.to_vec(), data)?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::BroadcastTo(self.id), rg))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.graph.elementwise(*self, *other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.graph.elementwise(*self, *other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.graph.elementwise(*self, *other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.graph.elementwise(*self, *other, "div", Op::Div, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.graph.unary(*self, Op::Scale(self.id, c), |t| t.map(|v| v * c))
    }

    pub fn relu(&self) -> Var<'g> {
        self.graph.unary(*self, Op::Relu(self.id), |t| t.map(|v| v.max(0.0)))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.graph.unary(*self, Op::Sigmoid(self.id), |t| t.map(kernels::sigmoid))
    }

    pub fn ln(&self) -> Var<'g> {
        self.graph.unary(*self, Op::Log(self.id), |t| t.map(f64::ln))
    }

    pub fn exp(&self) -> Var<'g> {
        self.graph.unary(*self, Op::Exp(self.id), |t| t.map(f64::exp))
    }

    /// Softmax along the last axis, shifted by the slice maximum.
    pub fn softmax_lastdim(&self) -> Result<Var<'g>> {
        let s = self.shape();
        let last = *s.last().unwrap_or(&0);
        if last == 0 {
            return Err(SpilError::InvalidShape {
                op: "softmax_lastdim",
                shape: s,
                reason: "empty last axis".into(),
            });
        }
        Ok(self.graph.unary(*self, Op::Softmax(self.id), |t| {
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(last) {
                kernels::softmax_in_place(row);
            }
            Tensor::new(t.shape().to_vec(), out).expect("softmax shape")
        }))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(SpilError::InvalidShape {
                op,
                shape: s,
                reason: format!("axis {axis} out of range"),
            });
        }
        Ok(s)
    }

    fn reduced_shape(s: &[usize], axis: usize) -> Vec<usize> {
        let mut out: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out.is_empty() {
            out.push(1);
        }
        out
    }

    /// Maximum over `axis` (removed from the shape). Ties route the gradient
    /// to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'g>> {
        let s = self.check_axis("reduce_max", axis)?;
        let (outer, len, inner) = split_axis(&s, axis);
        let (value, argmax) = {
            let v = self.value();
            let d = v.data();
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let x = d[(o * len + l) * inner + i];
                        let slot = o * inner + i;
                        if x > out[slot] {
                            out[slot] = x;
                            arg[slot] = l;
                        }
                    }
                }
            }
            (Tensor::new(Self::reduced_shape(&s, axis), out)?, arg)
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(
            value,
            Op::ReduceMax {
                input: self.id,
                axis,
                argmax,
            },
            rg,
        ))
    }

    fn sum_like(&self, op: &'static str, axis: usize, mean: bool) -> Result<Var<'g>> {
        let s = self.check_axis(op, axis)?;
        let (outer, len, inner) = split_axis(&s, axis);
        let value = {
            let v = self.value();
            let d = v.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * len + l) * inner + i];
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|x| *x /= len as f64);
            }
            Tensor::new(Self::reduced_shape(&s, axis), out)?
        };
        let rg = self.requires_grad();
        let op = if mean {
            Op::ReduceMean { input: self.id, axis }
        } else {
            Op::ReduceSum { input: self.id, axis }
        };
        Ok(self.graph.push(value, op, rg))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.sum_like("reduce_mean", axis, true)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.sum_like("reduce_sum", axis, false)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&self) -> Result<Var<'g>> {
        let n = self.value().numel();
        self.reshape(&[n])?.sum_axis(0)
    }

    /// Selects rows along axis 0 (repeats allowed); the gradient scatter-adds.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'g>> {
        let s = self.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(SpilError::InvalidShape {
                op: "index_select",
                shape: s,
                reason: format!("index {bad} out of range"),
            });
        }
        let row: usize = s[1..].iter().product();
        let value = {
            let v = self.value();
            let mut data = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                data.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
            }
            let mut shape = s.clone();
            shape[0] = indices.len();
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(
            value,
            Op::IndexSelect {
                input: self.id,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }
}
