//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! Every operation applied to a [`Var`] appends one node to its [`Tape`]
//! holding the computed value plus whatever the backward rule needs. Node ids
//! increase in creation order, so walking the tape from the loss back to id 0
//! visits nodes in reverse topological order. A tape is confined to one thread
//! and supports a single backward pass.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::TensorOps;
use crate::tensor::{gelu_grad, Tensor};

thread_local! {
    static CORRUPTED_RULE: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of the named op deliberately scaled by 1.5.
/// Exists only so gradient checks can be shown to catch a broken rule.
#[doc(hidden)]
pub fn with_corrupted_backward<R>(op: &'static str, f: impl FnOnce() -> R) -> R {
    assert!(OP_NAMES.contains(&op), "unknown op {op}");
    let previous = CORRUPTED_RULE.with(|c| c.replace(Some(op)));
    let out = f();
    CORRUPTED_RULE.with(|c| c.set(previous));
    out
}

const OP_NAMES: &[&str] = &[
    "matmul", "transpose", "swap_leading", "reshape", "add", "sub", "mul", "scale", "add_row_bias",
    "softmax_rows", "layer_norm", "relu", "gelu", "abs", "sum", "mean", "concat_last", "slice_last",
    "slice_rows", "pad_rows", "embedding", "segment_means", "pinv_init", "sub_from_identity",
];

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Transpose(usize),
    SwapLeading(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowBias(usize, usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Relu(usize),
    Gelu(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    SliceLast { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    PadRows(usize),
    Embedding { table: usize, indices: Vec<usize> },
    SegmentMeans(usize),
    PinvInit { a: usize, scale: f64, col: usize, row: usize },
    SubFromIdentity(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::SwapLeading(_) => "swap_leading",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(_) => "concat_last",
            Op::SliceLast { .. } => "slice_last",
            Op::SliceRows { .. } => "slice_rows",
            Op::PadRows(_) => "pad_rows",
            Op::Embedding { .. } => "embedding",
            Op::SegmentMeans(_) => "segment_means",
            Op::PinvInit { .. } => "pinv_init",
            Op::SubFromIdentity(_) => "sub_from_identity",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat(parts) => parts.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::SliceLast { x, .. } | Op::SliceRows { x, .. } => vec![*x],
            Op::PinvInit { a, .. } => vec![*a],
            Op::Transpose(x)
            | Op::SwapLeading(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::PadRows(x)
            | Op::SegmentMeans(x)
            | Op::SubFromIdentity(x) => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// A tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &TensorOps::shape(self))
            .finish()
    }
}

/// Gradients of the loss with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, trainable: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates gradients from a scalar `loss` to every trainable leaf.
    /// The tape cannot be differentiated a second time.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::invalid("backward", "loss belongs to a different tape"));
        }
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 || loss_node.value.shape().iter().any(|&d| d != 1) {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(Error::Detached);
        }
        self.consumed.set(true);

        let corrupted = CORRUPTED_RULE.with(Cell::get);
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let mut contributions = backward_rule(&nodes, node, &g)?;
            if corrupted == Some(node.op.name()) {
                for (_, c) in &mut contributions {
                    *c = c.scale(1.5);
                }
            }
            for (parent, contribution) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.accumulate(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }

        let by_leaf = nodes
            .iter()
            .enumerate()
            .take(loss.id + 1)
            .filter(|(_, n)| n.trainable)
            .map(|(id, n)| {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients { by_leaf })
    }
}

fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].requires_grad;
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, trans_b } => {
            let (a, b, trans_b) = (*a, *b, *trans_b);
            let mut v = Vec::with_capacity(2);
            if trans_b {
                // C = A·Bᵀ
                if needs(a) {
                    v.push((a, g.matmul_ex(val(b), false, false)?));
                }
                if needs(b) {
                    v.push((b, g.matmul_ex(val(a), true, false)?));
                }
            } else {
                if needs(a) {
                    v.push((a, g.matmul_ex(val(b), false, true)?));
                }
                if needs(b) {
                    v.push((b, val(a).matmul_ex(g, true, false)?));
                }
            }
            v
        }
        Op::Transpose(x) => vec![(*x, g.transpose()?)],
        Op::SwapLeading(x) => vec![(*x, g.swap_leading()?)],
        Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
        Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
        Op::Scale(x, s) => vec![(*x, g.scale(*s))],
        Op::AddRowBias(x, b) => {
            let (rows, cols) = g.row_view();
            let mut gb = vec![0.0; cols];
            for i in 0..rows {
                for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                    *acc += v;
                }
            }
            vec![(*x, g.clone()), (*b, Tensor::new(&[cols], gb)?)]
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let (rows, cols) = y.row_view();
            let mut gx = y.clone();
            for i in 0..rows {
                let yr = y.row(i);
                let gr = g.row(i);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (j, out) in gx.data_mut()[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                    *out = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*x, gx)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (rows, cols) = xhat.row_view();
            let gamma = val(*gain).data();
            let mut gx = Tensor::zeros(val(*x).shape());
            let mut ggain = vec![0.0; cols];
            let mut gbias = vec![0.0; cols];
            let d = cols as f64;
            for i in 0..rows {
                let gr = g.row(i);
                let xr = xhat.row(i);
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..cols {
                    let dxhat = gr[j] * gamma[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xr[j];
                    ggain[j] += gr[j] * xr[j];
                    gbias[j] += gr[j];
                }
                let out = &mut gx.data_mut()[i * cols..(i + 1) * cols];
                for j in 0..cols {
                    let dxhat = gr[j] * gamma[j];
                    out[j] = inv_std[i] / d * (d * dxhat - sum_dxhat - xr[j] * sum_dxhat_xhat);
                }
            }
            vec![
                (*x, gx),
                (*gain, Tensor::new(&[cols], ggain)?),
                (*bias, Tensor::new(&[cols], gbias)?),
            ]
        }
        Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |g, x| if x > 0.0 { g } else { 0.0 }))],
        Op::Gelu(x) => vec![(*x, g.zip_map(val(*x), |g, x| g * gelu_grad(x)))],
        Op::Abs(x) => vec![(
            *x,
            g.zip_map(val(*x), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
        )],
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            let mut v = Vec::with_capacity(parts.len());
            for &p in parts {
                let w = val(p).row_view().1;
                v.push((p, g.slice_last(offset, offset + w)?));
                offset += w;
            }
            v
        }
        Op::SliceLast { x, start } => {
            let mut gx = Tensor::zeros(val(*x).shape());
            let (rows, cols) = gx.row_view();
            let (_, width) = g.row_view();
            for i in 0..rows {
                gx.data_mut()[i * cols + start..i * cols + start + width].copy_from_slice(g.row(i));
            }
            vec![(*x, gx)]
        }
        Op::SliceRows { x, start } => {
            let mut gx = Tensor::zeros(val(*x).shape());
            let lead = gx.shape()[0].max(1);
            let stride = gx.len() / lead;
            gx.data_mut()[start * stride..start * stride + g.len()].copy_from_slice(g.data());
            vec![(*x, gx)]
        }
        Op::PadRows(x) => {
            let rows = val(*x).shape()[0];
            vec![(*x, g.slice_rows(0, rows)?)]
        }
        Op::Embedding { table, indices } => {
            let mut gt = Tensor::zeros(val(*table).shape());
            let d = gt.row_view().1;
            for (r, &ix) in indices.iter().enumerate() {
                let dst = &mut gt.data_mut()[ix * d..(ix + 1) * d];
                for (acc, v) in dst.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            vec![(*table, gt)]
        }
        Op::SegmentMeans(x) => {
            let (n, d) = val(*x).row_view();
            let m = g.row_view().0;
            let len = n / m;
            let inv = 1.0 / len as f64;
            let gx = Tensor::from_fn(&[n, d], |k| {
                let (i, j) = (k / d, k % d);
                g.at(i / len, j) * inv
            });
            vec![(*x, gx)]
        }
        Op::PinvInit { a, scale, col, row } => {
            let av = val(*a);
            let n = av.shape()[0];
            if *scale == 0.0 {
                return Ok(vec![(*a, Tensor::zeros(av.shape()))]);
            }
            // Z = c·Aᵀ with c = 1/(‖A‖₁‖A‖_∞)
            let mut ga = g.transpose()?.scale(*scale);
            let g_dot_at: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| g.at(i, j) * av.at(j, i))
                .sum();
            let n1 = av.norm_one();
            let ninf = av.norm_inf();
            let coef = -scale * g_dot_at;
            let data = ga.data_mut();
            for i in 0..n {
                for j in 0..n {
                    let s = av.at(i, j).signum() * (av.at(i, j) != 0.0) as u8 as f64;
                    let mut dc = 0.0;
                    if j == *col {
                        dc += s / n1;
                    }
                    if i == *row {
                        dc += s / ninf;
                    }
                    data[i * n + j] += coef * dc;
                }
            }
            vec![(*a, ga)]
        }
        Op::SubFromIdentity(x) => vec![(*x, g.scale(-1.0))],
    };
    Ok(out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with_values<R>(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        let value = self.with_value(f)?;
        Ok(self.tape.push(value, op))
    }

    fn binary(
        &self,
        rhs: &Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let value = self.with_values(rhs, f)?;
        Ok(self.tape.push(value, op))
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("var", "operands are recorded on different tapes"))
        }
    }
}

impl<'t> TensorOps for Var<'t> {
    fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    fn value(&self) -> Tensor {
        self.with_value(Tensor::clone)
    }

    fn all_finite(&self) -> bool {
        self.with_value(Tensor::is_finite)
    }

    fn constant(&self, value: Tensor) -> Self {
        self.tape.constant(value)
    }

    fn detach(&self) -> Self {
        self.tape.constant(self.value())
    }

    fn matmul(&self, rhs: &Self) -> Result<Self> {
        let op = Op::MatMul {
            a: self.id,
            b: rhs.id,
            trans_b: false,
        };
        self.binary(rhs, |a, b| a.matmul_ex(b, false, false), op)
    }

    fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        let op = Op::MatMul {
            a: self.id,
            b: rhs.id,
            trans_b: true,
        };
        self.binary(rhs, |a, b| a.matmul_ex(b, false, true), op)
    }

    fn transpose(&self) -> Result<Self> {
        self.unary(Tensor::transpose, Op::Transpose(self.id))
    }

    fn swap_leading(&self) -> Result<Self> {
        self.unary(Tensor::swap_leading, Op::SwapLeading(self.id))
    }

    fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.unary(|v| v.reshape(shape), Op::Reshape(self.id))
    }

    fn add(&self, rhs: &Self) -> Result<Self> {
        self.binary(rhs, Tensor::add, Op::Add(self.id, rhs.id))
    }

    fn sub(&self, rhs: &Self) -> Result<Self> {
        self.binary(rhs, Tensor::sub, Op::Sub(self.id, rhs.id))
    }

    fn mul(&self, rhs: &Self) -> Result<Self> {
        self.binary(rhs, Tensor::mul, Op::Mul(self.id, rhs.id))
    }

    fn scale(&self, s: f64) -> Self {
        let value = self.with_value(|v| v.scale(s));
        self.tape.push(value, Op::Scale(self.id, s))
    }

    fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        self.binary(bias, Tensor::add_row_bias, Op::AddRowBias(self.id, bias.id))
    }

    fn softmax_rows(&self) -> Result<Self> {
        self.unary(Tensor::softmax_rows, Op::Softmax(self.id))
    }

    fn layer_norm(&self, gain: &Self, bias: &Self) -> Result<Self> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .layer_norm_parts(&nodes[gain.id].value, &nodes[bias.id].value)?
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(out, op))
    }

    fn relu(&self) -> Self {
        let value = self.with_value(Tensor::relu);
        self.tape.push(value, Op::Relu(self.id))
    }

    fn gelu(&self) -> Self {
        let value = self.with_value(Tensor::gelu);
        self.tape.push(value, Op::Gelu(self.id))
    }

    fn abs(&self) -> Self {
        let value = self.with_value(Tensor::abs);
        self.tape.push(value, Op::Abs(self.id))
    }

    fn sum(&self) -> Self {
        let value = self.with_value(|v| Tensor::scalar(v.sum()));
        self.tape.push(value, Op::Sum(self.id))
    }

    fn mean(&self) -> Self {
        let value = self.with_value(|v| Tensor::scalar(v.mean()));
        self.tape.push(value, Op::Mean(self.id))
    }

    fn concat_last(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last", "no inputs"))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let value = {
            let nodes = first.tape.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Tensor::concat_last(&refs)?
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(value, Op::Concat(ids)))
    }

    fn slice_last(&self, start: usize, end: usize) -> Result<Self> {
        self.unary(|v| v.slice_last(start, end), Op::SliceLast { x: self.id, start })
    }

    fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        self.unary(|v| v.slice_rows(start, end), Op::SliceRows { x: self.id, start })
    }

    fn pad_rows(&self, rows: usize) -> Result<Self> {
        self.unary(|v| v.pad_rows(rows), Op::PadRows(self.id))
    }

    fn embedding(&self, indices: &[usize]) -> Result<Self> {
        let op = Op::Embedding {
            table: self.id,
            indices: indices.to_vec(),
        };
        self.unary(|v| v.embedding(indices), op)
    }

    fn segment_means(&self, m: usize) -> Result<Self> {
        self.unary(|v| v.segment_means(m), Op::SegmentMeans(self.id))
    }

    fn pinv_init(&self) -> Result<Self> {
        let (value, scale, col, row) = self.with_value(|a| -> Result<_> {
            let (z, scale) = a.pinv_init()?;
            Ok((z, scale, a.norm_one_argmax().1, a.norm_inf_argmax().1))
        })?;
        let op = Op::PinvInit {
            a: self.id,
            scale,
            col,
            row,
        };
        Ok(self.tape.push(value, op))
    }

    fn sub_from_identity(&self, c: f64) -> Result<Self> {
        self.unary(|v| v.sub_from_identity(c), Op::SubFromIdentity(self.id))
    }
}
