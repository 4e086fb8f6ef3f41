//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive on [`Tape`] computes its forward value eagerly and, when
//! the tape is recording and at least one input is tracked, appends a node
//! holding what the backward rule needs. Nodes are appended in execution
//! order, so the node list is always topologically sorted.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::{lit, Scalar};
use crate::tensor::{axis_split, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Silu,
    Sigmoid,
}

enum Op<T> {
    Leaf,
    Lincomb(Vec<(T, Tensor<T>)>),
    Mul(Tensor<T>, Tensor<T>),
    Unary(Activation, Tensor<T>, Tensor<T>),
    BroadcastAdd {
        x: Tensor<T>,
        bias: Tensor<T>,
        axis: usize,
    },
    BroadcastMul {
        x: Tensor<T>,
        scale: Tensor<T>,
        axis: usize,
    },
    Matmul(Tensor<T>, Tensor<T>),
    Permute(Tensor<T>, Vec<usize>),
    Reshape(Tensor<T>),
    Passthrough(Tensor<T>),
    Concat(Vec<Tensor<T>>, usize),
    Narrow {
        x: Tensor<T>,
        axis: usize,
        start: usize,
    },
    Sum(Tensor<T>),
    Softmax(Tensor<T>, Tensor<T>),
    Conv2d(Tensor<T>, Tensor<T>, ConvGeom),
    GroupNorm {
        x: Tensor<T>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        block: usize,
    },
    Embedding(Tensor<T>, Vec<usize>),
    Upsample(Tensor<T>, usize),
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Lincomb(terms) => terms.iter().map(|(_, t)| t).collect(),
            Op::Mul(a, b) | Op::Matmul(a, b) | Op::Conv2d(a, b, _) => vec![a, b],
            Op::Unary(_, x, _)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Passthrough(x)
            | Op::Sum(x)
            | Op::Softmax(x, _)
            | Op::Upsample(x, _) => vec![x],
            Op::BroadcastAdd { x, bias, .. } => vec![x, bias],
            Op::BroadcastMul { x, scale, .. } => vec![x, scale],
            Op::Concat(xs, _) => xs.iter().collect(),
            Op::Narrow { x, .. } | Op::GroupNorm { x, .. } => vec![x],
            Op::Embedding(table, _) => vec![table],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Recorded computation. Not `Sync`: one tape belongs to one thread.
pub struct Tape<T> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that reaches it.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        t.node()
            .and_then(|n| self.grads.get(n))
            .and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `t`; zeros if `t` does not reach the root.
    pub fn wrt(&self, t: &Tensor<T>) -> Tensor<T> {
        match self.get(t) {
            Some(g) => Tensor::from_parts(t.shape().to_vec(), g.to_vec()),
            None => Tensor::zeros(t.shape()),
        }
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that never records: every primitive returns untracked values.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `t` as a gradient-tracked leaf.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.detach();
        }
        let id = self.push_node(Op::Leaf, t.shape().to_vec());
        t.detach().with_node(id)
    }

    fn push_node(&self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, shape });
        nodes.len() - 1
    }

    fn emit(
        &self,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        op: impl FnOnce() -> Op<T>,
    ) -> Tensor<T> {
        if cfg!(debug_assertions)
            && !data.iter().all(|v| v.is_finite())
            && inputs.iter().all(|t| t.all_finite())
        {
            panic!("non-finite forward value from finite inputs (shape {shape:?})");
        }
        let out = Tensor::from_parts(shape.clone(), data);
        if self.recording && inputs.iter().any(|t| t.is_tracked()) {
            let id = self.push_node(op(), shape);
            out.with_node(id)
        } else {
            out
        }
    }

    /// `Σ cᵢ·xᵢ` over same-shaped tensors.
    pub fn lincomb(&self, terms: &[(T, &Tensor<T>)]) -> Result<Tensor<T>> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::Contract("lincomb needs at least one term".into()))?;
        for (_, t) in &terms[1..] {
            same_shape("lincomb", first, t)?;
        }
        let mut data = vec![T::zero(); first.numel()];
        for (c, t) in terms {
            for (o, &v) in data.iter_mut().zip(t.data()) {
                *o += *c * v;
            }
        }
        let inputs: Vec<&Tensor<T>> = terms.iter().map(|(_, t)| *t).collect();
        Ok(self.emit(first.shape().to_vec(), data, &inputs, || {
            Op::Lincomb(terms.iter().map(|(c, t)| (*c, (*t).clone())).collect())
        }))
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.lincomb(&[(T::one(), a), (T::one(), b)])
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.lincomb(&[(T::one(), a), (-T::one(), b)])
    }

    pub fn scale(&self, a: &Tensor<T>, c: T) -> Tensor<T> {
        self.lincomb(&[(c, a)]).expect("single-term lincomb")
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        Ok(self.emit(a.shape().to_vec(), data, &[a, b], || {
            Op::Mul(a.clone(), b.clone())
        }))
    }

    pub fn activation(&self, x: &Tensor<T>, kind: Activation) -> Tensor<T> {
        let f = |v: T| match kind {
            Activation::Tanh => v.tanh(),
            Activation::Silu => v * kernels::sigmoid(v),
            Activation::Sigmoid => kernels::sigmoid(v),
        };
        let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data.clone());
        self.emit(x.shape().to_vec(), data, &[x], || {
            Op::Unary(kind, x.clone(), out)
        })
    }

    pub fn tanh(&self, x: &Tensor<T>) -> Tensor<T> {
        self.activation(x, Activation::Tanh)
    }

    pub fn silu(&self, x: &Tensor<T>) -> Tensor<T> {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&self, x: &Tensor<T>) -> Tensor<T> {
        self.activation(x, Activation::Sigmoid)
    }

    fn check_broadcast(op: &'static str, x: &Tensor<T>, v: &Tensor<T>, axis: usize) -> Result<()> {
        if axis >= x.rank() || v.numel() != x.shape()[axis] {
            return Err(Error::dim(
                op,
                format!(
                    "vector of {} along axis {axis} of {:?}",
                    v.numel(),
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Adds `bias[c]` to every element whose index along `axis` is `c`.
    pub fn broadcast_add(&self, x: &Tensor<T>, bias: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        Self::check_broadcast("broadcast_add", x, bias, axis)?;
        let (outer, c, inner) = axis_split(x.shape(), axis);
        let mut data = x.to_vec();
        for o in 0..outer {
            for (ci, &b) in bias.data().iter().enumerate().take(c) {
                let s = (o * c + ci) * inner;
                data[s..s + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(self.emit(x.shape().to_vec(), data, &[x, bias], || Op::BroadcastAdd {
            x: x.clone(),
            bias: bias.clone(),
            axis,
        }))
    }

    /// Multiplies every element whose index along `axis` is `c` by `scale[c]`.
    pub fn broadcast_mul(
        &self,
        x: &Tensor<T>,
        scale: &Tensor<T>,
        axis: usize,
    ) -> Result<Tensor<T>> {
        Self::check_broadcast("broadcast_mul", x, scale, axis)?;
        let (outer, c, inner) = axis_split(x.shape(), axis);
        let mut data = x.to_vec();
        for o in 0..outer {
            for (ci, &s) in scale.data().iter().enumerate().take(c) {
                let st = (o * c + ci) * inner;
                data[st..st + inner].iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok(self.emit(x.shape().to_vec(), data, &[x, scale], || Op::BroadcastMul {
            x: x.clone(),
            scale: scale.clone(),
            axis,
        }))
    }

    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![T::zero(); m * n];
        T::gemm(
            m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut data,
            n as isize, 1,
        );
        Ok(self.emit(vec![m, n], data, &[a, b], || {
            Op::Matmul(a.clone(), b.clone())
        }))
    }

    pub fn permute(&self, x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", x.rank()),
            ));
        }
        let data = kernels::permute(x.data(), x.shape(), perm);
        let shape = perm.iter().map(|&p| x.shape()[p]).collect();
        Ok(self.emit(shape, data, &[x], || Op::Permute(x.clone(), perm.to_vec())))
    }

    pub fn transpose(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 {
            return Err(Error::dim("transpose", format!("rank {} tensor", x.rank())));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let plain = x.reshaped(shape)?;
        if self.recording && x.is_tracked() {
            let id = self.push_node(Op::Reshape(x.clone()), shape.to_vec());
            Ok(plain.with_node(id))
        } else {
            Ok(plain)
        }
    }

    pub fn flatten(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.reshape(x, &[x.numel()])
    }

    pub fn concat(&self, xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::dim("concat", format!("axis {axis} of {:?}", first.shape())));
        }
        for t in xs {
            let ok = t.rank() == first.rank()
                && (0..t.rank()).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), t.shape()),
                ));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let total: usize = xs.iter().map(|t| t.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in xs {
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(self.emit(shape, data, xs, || {
            Op::Concat(xs.iter().map(|t| (*t).clone()).collect(), axis)
        }))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn narrow(&self, x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return Err(Error::dim(
                "narrow",
                format!("[{start}, {}) along axis {axis} of {:?}", start + len, x.shape()),
            ));
        }
        let (outer, c, inner) = axis_split(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * c + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.emit(shape, data, &[x], || Op::Narrow {
            x: x.clone(),
            axis,
            start,
        }))
    }

    pub fn sum(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.data().iter().copied().sum();
        self.emit(vec![], vec![s], &[x], || Op::Sum(x.clone()))
    }

    pub fn mean(&self, x: &Tensor<T>) -> Tensor<T> {
        let n: T = lit(x.numel().max(1) as f64);
        self.scale(&self.sum(x), T::one() / n)
    }

    /// Mean of squared differences.
    pub fn mse(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.sub(a, b)?;
        Ok(self.mean(&self.mul(&d, &d)?))
    }

    /// Softmax along the last axis; columns with `keep[j] == false` get zero
    /// probability. Every row must keep at least one column.
    pub fn softmax(&self, x: &Tensor<T>, keep: Option<&[bool]>) -> Result<Tensor<T>> {
        let cols = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax", "rank-0 tensor"))?;
        if let Some(k) = keep {
            if k.len() != cols {
                return Err(Error::dim("softmax", format!("mask of {} for {cols} columns", k.len())));
            }
            if !k.iter().any(|&b| b) {
                return Err(Error::Input("softmax mask excludes every column".into()));
            }
        }
        if cols == 0 {
            return Err(Error::dim("softmax", "zero columns"));
        }
        let data = kernels::softmax_forward(x.data(), cols, keep);
        let out = Tensor::from_parts(x.shape().to_vec(), data.clone());
        Ok(self.emit(x.shape().to_vec(), data, &[x], || Op::Softmax(x.clone(), out)))
    }

    /// 2-D cross-correlation (no kernel flip, no bias).
    pub fn conv2d(&self, x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} with kernel {:?}", x.shape(), w.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh > ph || kw > pw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {kh}x{kw}, stride {stride}, pad {pad} does not tile input {h}x{wd}"
                ),
            ));
        }
        let geom = ConvGeom {
            batch: b,
            in_ch: c,
            height: h,
            width: wd,
            out_ch: o,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(&geom, x.data(), w.data());
        Ok(self.emit(vec![b, o, geom.out_h, geom.out_w], data, &[x, w], || {
            Op::Conv2d(x.clone(), w.clone(), geom)
        }))
    }

    /// Normalizes `x[B, C, ...]` per sample over each group of `C / groups`
    /// channels (and all trailing axes) to zero mean and unit variance.
    pub fn group_norm(&self, x: &Tensor<T>, groups: usize, eps: T) -> Result<Tensor<T>> {
        if x.rank() < 2 || groups == 0 || x.shape()[1] % groups != 0 {
            return Err(Error::dim(
                "group_norm",
                format!("{groups} groups over input {:?}", x.shape()),
            ));
        }
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let spatial: usize = x.shape()[2..].iter().product();
        let (xhat, inv_std) = kernels::group_norm_forward(x.data(), b, c, spatial, groups, eps);
        let block = c / groups * spatial;
        let saved = (x.is_tracked() && self.recording).then(|| xhat.clone());
        Ok(self.emit(x.shape().to_vec(), xhat, &[x], || Op::GroupNorm {
            x: x.clone(),
            xhat: saved.unwrap_or_default(),
            inv_std,
            block,
        }))
    }

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&self, table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        if table.rank() != 2 {
            return Err(Error::dim("embedding", format!("table {:?}", table.shape())));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("embedding id {bad} out of range 0..{v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        Ok(self.emit(vec![ids.len(), d], data, &[table], || {
            Op::Embedding(table.clone(), ids.to_vec())
        }))
    }

    /// Nearest-neighbour upsampling of `x[B, C, H, W]` by an integer factor.
    pub fn upsample(&self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        if x.rank() != 4 || factor == 0 {
            return Err(Error::dim("upsample", format!("{:?} by {factor}", x.shape())));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(b * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for xx in 0..ow {
                    data.push(row[xx / factor]);
                }
            }
        }
        Ok(self.emit(vec![b, c, oh, ow], data, &[x], || {
            Op::Upsample(x.clone(), factor)
        }))
    }

    /// Forward value `value`, gradient passed unchanged to `source`
    /// (straight-through estimator).
    pub fn straight_through(&self, source: &Tensor<T>, value: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("straight_through", source, value)?;
        Ok(self.emit(value.shape().to_vec(), value.to_vec(), &[source], || {
            Op::Passthrough(source.clone())
        }))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&self, x: &Tensor<T>) -> Tensor<T> {
        x.detach()
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: &Tensor<T>) -> Result<Gradients<T>> {
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                root.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.node() else {
            return Ok(Gradients { grads });
        };
        grads[root_id] = Some(vec![T::one()]);
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let contribs = backward_rule(&node.op, &node.shape, &g);
            for (input, contrib) in node.op.inputs().into_iter().zip(contribs) {
                if let (Some(pid), Some(c)) = (input.node(), contrib) {
                    accumulate(&mut grads[pid], c);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn wants<T: Scalar>(t: &Tensor<T>) -> bool {
    t.node().is_some()
}

/// Gradient contribution for each input of `op`, in `Op::inputs` order.
fn backward_rule<T: Scalar>(op: &Op<T>, out_shape: &[usize], g: &[T]) -> Vec<Option<Vec<T>>> {
    match op {
        Op::Leaf => vec![],
        Op::Lincomb(terms) => terms
            .iter()
            .map(|(c, t)| wants(t).then(|| g.iter().map(|&v| *c * v).collect()))
            .collect(),
        Op::Mul(a, b) => vec![
            wants(a).then(|| g.iter().zip(b.data()).map(|(&x, &y)| x * y).collect()),
            wants(b).then(|| g.iter().zip(a.data()).map(|(&x, &y)| x * y).collect()),
        ],
        Op::Unary(kind, x, y) => {
            let d: Vec<T> = match kind {
                Activation::Tanh => g
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                    .collect(),
                Activation::Sigmoid => g
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect(),
                Activation::Silu => g
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| {
                        let s = kernels::sigmoid(xi);
                        gi * s * (T::one() + xi * (T::one() - s))
                    })
                    .collect(),
            };
            vec![Some(d)]
        }
        Op::BroadcastAdd { x, bias, axis } => {
            let db = wants(bias).then(|| {
                let (outer, c, inner) = axis_split(x.shape(), *axis);
                let mut db = vec![T::zero(); c];
                for o in 0..outer {
                    for (ci, d) in db.iter_mut().enumerate() {
                        let s = (o * c + ci) * inner;
                        *d += g[s..s + inner].iter().copied().sum::<T>();
                    }
                }
                db
            });
            vec![wants(x).then(|| g.to_vec()), db]
        }
        Op::BroadcastMul { x, scale, axis } => {
            let (outer, c, inner) = axis_split(x.shape(), *axis);
            let dx = wants(x).then(|| {
                let mut dx = g.to_vec();
                for o in 0..outer {
                    for (ci, &s) in scale.data().iter().enumerate() {
                        let st = (o * c + ci) * inner;
                        dx[st..st + inner].iter_mut().for_each(|v| *v *= s);
                    }
                }
                dx
            });
            let ds = wants(scale).then(|| {
                let mut ds = vec![T::zero(); c];
                for o in 0..outer {
                    for (ci, d) in ds.iter_mut().enumerate() {
                        let st = (o * c + ci) * inner;
                        *d += g[st..st + inner]
                            .iter()
                            .zip(&x.data()[st..st + inner])
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                    }
                }
                ds
            });
            vec![dx, ds]
        }
        Op::Matmul(a, b) => {
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = wants(a).then(|| {
                // g[m,n] · bᵀ[n,k]
                let mut da = vec![T::zero(); m * k];
                T::gemm(
                    m, n, k, g, n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut da,
                    k as isize, 1,
                );
                da
            });
            let db = wants(b).then(|| {
                // aᵀ[k,m] · g[m,n]
                let mut db = vec![T::zero(); k * n];
                T::gemm(
                    k, m, n, a.data(), 1, k as isize, g, n as isize, 1, T::zero(), &mut db,
                    n as isize, 1,
                );
                db
            });
            vec![da, db]
        }
        Op::Permute(_, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(kernels::permute(g, out_shape, &inv))]
        }
        Op::Reshape(_) | Op::Passthrough(_) => vec![Some(g.to_vec())],
        Op::Sum(x) => vec![Some(vec![g[0]; x.numel()])],
        Op::Concat(xs, axis) => {
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            xs.iter()
                .map(|t| {
                    let len = t.shape()[*axis];
                    let r = wants(t).then(|| {
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g[s..s + len * inner]);
                        }
                        d
                    });
                    offset += len;
                    r
                })
                .collect()
        }
        Op::Narrow { x, axis, start } => {
            let (outer, c, inner) = axis_split(x.shape(), *axis);
            let len = out_shape[*axis];
            let mut d = vec![T::zero(); x.numel()];
            for o in 0..outer {
                let s = (o * c + start) * inner;
                d[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }
        Op::Softmax(_, y) => {
            let cols = *out_shape.last().unwrap();
            vec![Some(kernels::softmax_backward(y.data(), g, cols))]
        }
        Op::Conv2d(x, w, geom) => {
            let (dx, dw) =
                kernels::conv2d_backward(geom, x.data(), w.data(), g, wants(x), wants(w));
            vec![dx, dw]
        }
        Op::GroupNorm {
            xhat,
            inv_std,
            block,
            ..
        } => vec![Some(kernels::group_norm_backward(xhat, inv_std, g, *block))],
        Op::Embedding(table, ids) => {
            let d = table.shape()[1];
            let mut dt = vec![T::zero(); table.numel()];
            for (row, &i) in ids.iter().enumerate() {
                for (a, &b) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                    *a += b;
                }
            }
            vec![Some(dt)]
        }
        Op::Upsample(x, factor) => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (oh, ow) = (h * factor, w * factor);
            let mut dx = vec![T::zero(); x.numel()];
            for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                for y in 0..oh {
                    for xx in 0..ow {
                        plane[(y / factor) * w + xx / factor] += gp[y * ow + xx];
                    }
                }
            }
            vec![Some(dx)]
        }
    }
}
