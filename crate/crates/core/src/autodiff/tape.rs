//! Eager Wengert tape with named injection sites.
//!
//! Every op computes its value when it is recorded. A reverse sweep from a
//! scalar loss fills gradients for every node on a path to the requested
//! targets, so the gradients at all registered sites and at the input come out
//! of the same sweep.

use std::cell::Cell;
use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use crate::error::{Result, SlatError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds accepted by [`Tape::record`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    /// inputs: `[x, w, b]`
    Dense,
    /// inputs: `[x, kernel, bias]`
    Conv2d,
    Relu,
    Softplus,
    MaxPool2x2,
    Flatten,
    Add,
    Scale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { var: bool },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, k: NodeId, b: NodeId, geom: ConvGeom },
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulScalar { x: NodeId, s: NodeId },
    Sum(NodeId),
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    XentGrad { logits: NodeId, probs: Vec<f64> },
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    SumRows(NodeId),
    CosineSum { a: NodeId, b: NodeId },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Op::Relu(x) | Op::Softplus(x) | Op::Sigmoid(x) | Op::Reshape(x) | Op::Sum(x) | Op::SumRows(x) => {
                vec![*x]
            }
            Op::Scale(x, _) => vec![*x],
            Op::MaxPool2 { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulScalar { x, s } => vec![*x, *s],
            Op::SoftmaxXent { logits, .. } | Op::XentGrad { logits, .. } => vec![*logits],
            Op::Matmul { a, b, .. } | Op::CosineSum { a, b } => vec![*a, *b],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::MaxPool2 { .. } => "maxpool2x2",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Sum(_) => "sum",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::XentGrad { .. } => "xent_grad",
            Op::Matmul { .. } => "matmul",
            Op::SumRows(_) => "sum_rows",
            Op::CosineSum { .. } => "cosine_sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub forward: usize,
    pub backward: usize,
}

thread_local! {
    static PASSES: Cell<PassCounts> = const { Cell::new(PassCounts { forward: 0, backward: 0 }) };
}

/// Forward/backward passes run on this thread since the last reset.
pub fn pass_counts() -> PassCounts {
    PASSES.with(Cell::get)
}

pub fn reset_pass_counts() {
    PASSES.with(|p| p.set(PassCounts::default()));
}

pub(crate) fn note_forward() {
    PASSES.with(|p| {
        let mut c = p.get();
        c.forward += 1;
        p.set(c);
    });
}

fn note_backward() {
    PASSES.with(|p| {
        let mut c = p.get();
        c.backward += 1;
        p.set(c);
    });
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    sites: BTreeMap<usize, NodeId>,
    grads: Vec<Option<Tensor>>,
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// `(rows, width)` view of a dense operand: rank-1 tensors are a single row.
fn as_matrix(t: &Tensor) -> (usize, usize) {
    match t.rank() {
        0 => (1, 1),
        1 => (1, t.len()),
        _ => (t.batch(), t.row_len()),
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { var: true }, value)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { var: false }, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn register_site(&mut self, k: usize, id: NodeId) {
        self.sites.insert(k, id);
    }

    pub fn site(&self, k: usize) -> Result<NodeId> {
        self.sites.get(&k).copied().ok_or(SlatError::UnknownSite(k))
    }

    pub fn sites(&self) -> &BTreeMap<usize, NodeId> {
        &self.sites
    }

    pub fn site_grad(&self, k: usize) -> Result<&Tensor> {
        let id = self.site(k)?;
        self.grad(id).ok_or(SlatError::UnknownSite(k))
    }

    /// Generic entry point mirroring the typed constructors below.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let want = match kind {
            OpKind::Dense | OpKind::Conv2d => 3,
            OpKind::Add => 2,
            _ => 1,
        };
        if inputs.len() != want {
            return Err(SlatError::shape("record", want, inputs.len()));
        }
        match kind {
            OpKind::Dense => self.dense(inputs[0], inputs[1], inputs[2]),
            OpKind::Conv2d => self.conv2d(inputs[0], inputs[1], inputs[2]),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Softplus => Ok(self.softplus(inputs[0])),
            OpKind::MaxPool2x2 => self.maxpool2x2(inputs[0]),
            OpKind::Flatten => self.flatten(inputs[0]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Scale(c) => Ok(self.scale(inputs[0], c)),
        }
    }

    /// `x W^T + b` with `W: [out, in]`, `b: [out]`, `x: [in]` or `[B, in]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 || xv.rank() == 0 || xv.rank() > 2 {
            return Err(SlatError::shape("dense", "W rank 2, x rank 1 or 2", (wv.shape(), xv.shape())));
        }
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        let (m, width) = as_matrix(xv);
        if width != inp || bv.shape() != [out] {
            return Err(SlatError::shape("dense", (inp, out), (xv.shape(), bv.shape())));
        }
        let mut data = Vec::with_capacity(m * out);
        for _ in 0..m {
            data.extend_from_slice(bv.data());
        }
        kernels::gemm(m, inp, out, xv.data(), false, wv.data(), true, &mut data, 1.0);
        let shape = if xv.rank() == 1 { vec![out] } else { vec![m, out] };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Dense { x, w, b }, value))
    }

    /// Stride-1, same-padded convolution; `x: [B, C, H, W]`, `kernel: [Co, C, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        if xv.rank() != 4 || kv.rank() != 4 {
            return Err(SlatError::shape("conv2d", "rank 4 input and kernel", (xv.shape(), kv.shape())));
        }
        let (batch, c_in, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (c_out, kc, kh, kw) = (kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]);
        if kc != c_in || kh != kw || kh % 2 == 0 || bv.shape() != [c_out] {
            return Err(SlatError::shape("conv2d", (c_in, "odd square kernel", c_out), (kv.shape(), bv.shape())));
        }
        let geom = ConvGeom { c_in, c_out, h, w, ksize: kh };
        let data = kernels::conv2d_forward(&geom, batch, xv.data(), kv.data(), bv.data());
        let value = Tensor::new(vec![batch, c_out, h, w], data)?;
        Ok(self.push(Op::Conv2d { x, k: kernel, b: bias, geom }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), v)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(kernels::softplus);
        self.push(Op::Softplus(x), v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(kernels::sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    /// 2x2 stride-2 max pooling on `[B, C, H, W]`.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 4 || xv.shape()[2] < 2 || xv.shape()[3] < 2 {
            return Err(SlatError::shape("maxpool2x2", "[B, C, H>=2, W>=2]", xv.shape()));
        }
        let s = xv.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (data, argmax) = kernels::maxpool2_forward(planes, h, w, xv.data());
        let value = Tensor::new(vec![s[0], s[1], h / 2, w / 2], data)?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, value))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(SlatError::shape("flatten", "rank >= 2", xv.shape()));
        }
        let shape = [xv.batch(), xv.row_len()];
        self.reshape(x, &shape)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b)).map_err(|_| {
            SlatError::shape("add", self.value(a).shape(), self.value(b).shape())
        })?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| SlatError::shape("mul", self.value(a).shape(), self.value(b).shape()))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(Op::Scale(x, c), v)
    }

    /// Tensor times a scalar node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(SlatError::shape("mul_scalar", "scalar", self.value(s).shape()));
        }
        let c = self.value(s).item();
        let v = self.value(x).scale(c);
        Ok(self.push(Op::MulScalar { x, s }, v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    /// Summed softmax cross-entropy over the batch; `logits: [C]` or `[B, C]`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, classes) = as_matrix(lv);
        if lv.rank() == 0 || lv.rank() > 2 || labels.len() != rows {
            return Err(SlatError::shape("softmax_xent", rows, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(SlatError::LabelOutOfRange { label: bad, classes });
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z = &lv.data()[i * classes..(i + 1) * classes];
            kernels::softmax_row(z, &mut probs[i * classes..(i + 1) * classes]);
            total += kernels::xent_row(z, y);
        }
        let op = Op::SoftmaxXent { logits, labels: labels.to_vec(), probs };
        Ok(self.push(op, Tensor::scalar(total)))
    }

    /// `softmax(logits) - onehot(labels)`, the derivative of the summed cross-entropy.
    pub fn xent_grad(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, classes) = as_matrix(lv);
        if labels.len() != rows {
            return Err(SlatError::shape("xent_grad", rows, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(SlatError::LabelOutOfRange { label: bad, classes });
        }
        let mut probs = vec![0.0; rows * classes];
        for i in 0..rows {
            let z = &lv.data()[i * classes..(i + 1) * classes];
            kernels::softmax_row(z, &mut probs[i * classes..(i + 1) * classes]);
        }
        let mut out = probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            out[i * classes + y] -= 1.0;
        }
        let value = Tensor::new(lv.shape().to_vec(), out)?;
        Ok(self.push(Op::XentGrad { logits, probs }, value))
    }

    /// `op(a) op(b)` for rank-2 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(SlatError::shape("matmul", "rank 2", (av.shape(), bv.shape())));
        }
        let (m, k) = if ta { (av.shape()[1], av.shape()[0]) } else { (av.shape()[0], av.shape()[1]) };
        let (k2, n) = if tb { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if k != k2 {
            return Err(SlatError::shape("matmul", k, k2));
        }
        let mut data = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut data, 0.0);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::Matmul { a, b, ta, tb }, value))
    }

    /// `[B, n] -> [n]` column sums.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(SlatError::shape("sum_rows", "rank 2", xv.shape()));
        }
        let n = xv.shape()[1];
        let mut out = vec![0.0; n];
        for i in 0..xv.batch() {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        Ok(self.push(Op::SumRows(x), Tensor::from_vec(out)))
    }

    /// Sum over batch rows of `cos(a_i, b_i)`. A row pair with a zero vector
    /// contributes 1 when both are zero and 0 otherwise, with zero gradient.
    pub fn cosine_sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(SlatError::shape("cosine_sum", av.shape(), bv.shape()));
        }
        let total = (0..av.batch()).map(|i| row_cosine(av.row(i), bv.row(i))).sum();
        Ok(self.push(Op::CosineSum { a, b }, Tensor::scalar(total)))
    }

    /// Reverse sweep over every variable leaf and registered site.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let mut targets: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf { var: true }))
            .map(NodeId)
            .collect();
        targets.extend(self.sites.values().copied());
        self.backward_to(loss, &targets)
    }

    /// Reverse sweep restricted to nodes lying on a path between `targets` and `loss`.
    pub fn backward_to(&mut self, loss: NodeId, targets: &[NodeId]) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(SlatError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        note_backward();
        let needed = self.dependents(loss, targets);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &needed, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// `needed[i]` iff node `i` depends on some target (or is one).
    fn dependents(&self, upto: NodeId, targets: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; upto.0 + 1];
        for t in targets {
            if t.0 <= upto.0 {
                needed[t.0] = true;
            }
        }
        for i in 0..=upto.0 {
            if !needed[i] {
                needed[i] = self.nodes[i].op.inputs().iter().any(|j| needed[j.0]);
            }
        }
        needed
    }

    fn vjp(&self, i: usize, g: &Tensor, needed: &[bool], grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let want = |id: &NodeId| needed[id.0];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                let (m, _) = as_matrix(xv);
                if want(x) {
                    let mut dx = vec![0.0; m * inp];
                    kernels::gemm(m, out, inp, g.data(), false, wv.data(), false, &mut dx, 0.0);
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if want(w) {
                    let mut dw = vec![0.0; out * inp];
                    kernels::gemm(out, m, inp, g.data(), true, xv.data(), false, &mut dw, 0.0);
                    accumulate(grads, *w, Tensor::new(vec![out, inp], dw)?);
                }
                if want(b) {
                    let mut db = vec![0.0; out];
                    for r in g.data().chunks(out) {
                        for (d, v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::from_vec(db));
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let want_k = want(k) || want(b);
                let (dx, dk, db) =
                    kernels::conv2d_backward(geom, xv.batch(), xv.data(), kv.data(), g.data(), want(x), want_k);
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if want(k) {
                    if let Some(dk) = dk {
                        accumulate(grads, *k, Tensor::new(kv.shape().to_vec(), dk)?);
                    }
                }
                if want(b) {
                    if let Some(db) = db {
                        accumulate(grads, *b, Tensor::from_vec(db));
                    }
                }
            }
            Op::Relu(x) => {
                if want(x) {
                    let d = self.value(*x).zip_map(g, |v, u| if v > 0.0 { u } else { 0.0 })?;
                    accumulate(grads, *x, d);
                }
            }
            Op::Softplus(x) => {
                if want(x) {
                    let d = self.value(*x).zip_map(g, |v, u| u * kernels::sigmoid(v))?;
                    accumulate(grads, *x, d);
                }
            }
            Op::Sigmoid(x) => {
                if want(x) {
                    let d = node.value.zip_map(g, |s, u| u * s * (1.0 - s))?;
                    accumulate(grads, *x, d);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if want(x) {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    let dd = d.data_mut();
                    for (&src, &u) in argmax.iter().zip(g.data()) {
                        dd[src as usize] += u;
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Reshape(x) => {
                if want(x) {
                    accumulate(grads, *x, g.clone().reshape(self.value(*x).shape())?);
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |u, v| u * v)?);
                }
                if want(b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |u, v| u * v)?);
                }
            }
            Op::Scale(x, c) => {
                if want(x) {
                    accumulate(grads, *x, g.scale(*c));
                }
            }
            Op::MulScalar { x, s } => {
                if want(x) {
                    accumulate(grads, *x, g.scale(self.value(*s).item()));
                }
                if want(s) {
                    let v = g.dot(self.value(*x));
                    let shape = self.value(*s).shape().to_vec();
                    accumulate(grads, *s, Tensor::new(shape, vec![v])?);
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g.item()));
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                if want(logits) {
                    let lv = self.value(*logits);
                    let classes = as_matrix(lv).1;
                    let u = g.item();
                    let mut d: Vec<f64> = probs.iter().map(|p| u * p).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * classes + y] -= u;
                    }
                    accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
            }
            Op::XentGrad { logits, probs } => {
                if want(logits) {
                    let lv = self.value(*logits);
                    let classes = as_matrix(lv).1;
                    let mut d = vec![0.0; probs.len()];
                    for ((dr, pr), ur) in d.chunks_mut(classes).zip(probs.chunks(classes)).zip(g.data().chunks(classes)) {
                        let inner: f64 = pr.iter().zip(ur).map(|(p, u)| p * u).sum();
                        for ((o, p), u) in dr.iter_mut().zip(pr).zip(ur) {
                            *o = p * (u - inner);
                        }
                    }
                    accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                if want(a) {
                    let mut d = vec![0.0; m * k];
                    if *ta {
                        kernels::gemm(k, n, m, bv.data(), *tb, g.data(), true, &mut d, 0.0);
                    } else {
                        kernels::gemm(m, n, k, g.data(), false, bv.data(), !*tb, &mut d, 0.0);
                    }
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if want(b) {
                    let mut d = vec![0.0; k * n];
                    if *tb {
                        kernels::gemm(n, m, k, g.data(), true, av.data(), *ta, &mut d, 0.0);
                    } else {
                        kernels::gemm(k, m, n, av.data(), !*ta, g.data(), false, &mut d, 0.0);
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::SumRows(x) => {
                if want(x) {
                    let xv = self.value(*x);
                    let mut d = Vec::with_capacity(xv.len());
                    for _ in 0..xv.batch() {
                        d.extend_from_slice(g.data());
                    }
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
            Op::CosineSum { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let u = g.item();
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for i in 0..av.batch() {
                    let (ra, rb) = (av.row(i), bv.row(i));
                    let (na, nb) = (norm(ra), norm(rb));
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let c = dot(ra, rb) / (na * nb);
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = u * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                    }
                    for (j, d) in db.row_mut(i).iter_mut().enumerate() {
                        *d = u * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                if want(a) {
                    accumulate(grads, *a, da);
                }
                if want(b) {
                    accumulate(grads, *b, db);
                }
            }
        }
        Ok(())
    }

    /// Records the gradient of `loss` with respect to `wrt` as new tape nodes so
    /// that it can itself be differentiated.
    ///
    /// Supported along the differentiated path: dense, softplus, add, scale,
    /// reshape, softmax cross-entropy and leaves.
    pub fn grad_graph(&mut self, loss: NodeId, wrt: NodeId) -> Result<NodeId> {
        if self.value(loss).len() != 1 {
            return Err(SlatError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let needed = self.dependents(loss, &[wrt]);
        if !needed[loss.0] {
            let z = Tensor::zeros(self.value(wrt).shape());
            return Ok(self.constant(z));
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; loss.0 + 1];
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        adj[loss.0] = Some(self.constant(seed));
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            let Some(a) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let mut push = |tape: &mut Tape, id: NodeId, contrib: NodeId| -> Result<()> {
                adj[id.0] = Some(match adj[id.0] {
                    Some(prev) => tape.add(prev, contrib)?,
                    None => contrib,
                });
                Ok(())
            };
            match op {
                Op::Leaf { .. } => {}
                Op::Dense { x, w, b } => {
                    if needed[x.0] {
                        let c = if self.value(x).rank() == 1 {
                            let m = self.matmul_vec(a, w)?;
                            self.reshape(m, &[self.value(w).shape()[1]])?
                        } else {
                            self.matmul(a, w, false, false)?
                        };
                        push(self, x, c)?;
                    }
                    if needed[w.0] {
                        let a2 = self.as_rows(a)?;
                        let x2 = self.as_rows(x)?;
                        let c = self.matmul(a2, x2, true, false)?;
                        push(self, w, c)?;
                    }
                    if needed[b.0] {
                        let a2 = self.as_rows(a)?;
                        let c = self.sum_rows(a2)?;
                        push(self, b, c)?;
                    }
                }
                Op::Softplus(x) => {
                    let s = self.sigmoid(x);
                    let c = self.mul(a, s)?;
                    push(self, x, c)?;
                }
                Op::Add(x, y) => {
                    if needed[x.0] {
                        push(self, x, a)?;
                    }
                    if needed[y.0] {
                        push(self, y, a)?;
                    }
                }
                Op::Scale(x, c) => {
                    let n = self.scale(a, c);
                    push(self, x, n)?;
                }
                Op::Reshape(x) => {
                    let shape = self.value(x).shape().to_vec();
                    let n = self.reshape(a, &shape)?;
                    push(self, x, n)?;
                }
                Op::SoftmaxXent { logits, labels, .. } => {
                    let d = self.xent_grad(logits, &labels)?;
                    let n = self.mul_scalar(d, a)?;
                    push(self, logits, n)?;
                }
                other => return Err(SlatError::UnsupportedOps(other.name().to_string())),
            }
        }
        match adj[wrt.0] {
            Some(g) => Ok(g),
            None => {
                let z = Tensor::zeros(self.value(wrt).shape());
                Ok(self.constant(z))
            }
        }
    }

    fn as_rows(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).rank() == 1 {
            let n = self.value(x).len();
            self.reshape(x, &[1, n])
        } else {
            Ok(x)
        }
    }

    fn matmul_vec(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let a2 = self.as_rows(a)?;
        self.matmul(a2, w, false, false)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with the zero-vector convention used across the crate.
pub fn row_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[1.0, 2.0]));
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(t(&[0.0, 0.0]));
        let y = tape.record(OpKind::Dense, &[x, w, b]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[-1.0, 3.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[0.0, 1.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn conv_hand_value() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(t(&[0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data()[4], 9.0);
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[1.0, 2.0, 3.0]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(t(&[0.0, 0.0]));
        assert!(matches!(tape.dense(x, w, b), Err(SlatError::ShapeMismatch { op: "dense", .. })));
        let y = tape.var(t(&[1.0, 2.0]));
        assert!(matches!(tape.add(x, y), Err(SlatError::ShapeMismatch { .. })));
    }

    #[test]
    fn xent_values() {
        let cases = [([0.0, 0.0], 2f64.ln()), ([10.0, 0.0], (-10f64).exp().ln_1p()), ([0.0, 10.0], 10.0 + (-10f64).exp().ln_1p())];
        for (z, want) in cases {
            let mut tape = Tape::new();
            let l = tape.var(t(&z));
            let loss = tape.softmax_xent(l, &[0]).unwrap();
            assert!((tape.value(loss).item() - want).abs() < 1e-12, "{z:?}");
        }
        let mut tape = Tape::new();
        let l = tape.var(t(&[0.0, 0.0]));
        assert!(matches!(tape.softmax_xent(l, &[2]), Err(SlatError::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.var(t(&[5.0, 5.0]));
        let w = tape.constant(Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap());
        let b = tape.constant(t(&[0.0]));
        let y = tape.dense(x, w, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(SlatError::NonScalarLoss(_))));
    }

    #[test]
    fn restricted_sweep_skips_unrelated_leaves() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[1.0, 2.0]));
        let w = tape.var(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let b = tape.var(t(&[0.5]));
        let y = tape.dense(x, w, b).unwrap();
        tape.backward_to(y, &[x]).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn cosine_zero_convention() {
        assert_eq!(row_cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(row_cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((row_cosine(&[1.0, 0.0], &[0.0, 2.0])).abs() < 1e-15);
    }

    #[test]
    fn pass_counter_tracks_backward() {
        reset_pass_counts();
        let mut tape = Tape::new();
        let x = tape.var(t(&[1.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(pass_counts().backward, 2);
    }
}
