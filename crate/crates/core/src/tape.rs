//! Reverse-mode differentiation over a linear recording of primitive ops.
//!
//! A [`Tape`] borrows the [`ParamStore`] for the duration of one forward pass.
//! Nodes are appended in evaluation order, so walking the node list backwards
//! is a valid reverse topological order.

use std::fmt;

use crate::error::{HstaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Primitive kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Param,
    MatMul,
    MatMulT,
    Add,
    AddRow,
    Scale,
    Softmax,
    LayerNorm,
    Concat,
    ConcatCols,
    SliceRows,
    Gelu,
    Sum,
    WeightedSum,
    MseOneHot,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::MatMulT,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::ConcatCols,
        OpKind::SliceRows,
        OpKind::Gelu,
        OpKind::Sum,
        OpKind::WeightedSum,
        OpKind::MseOneHot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::MatMulT => "matmul_t",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Concat => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::Gelu => "gelu",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::MseOneHot => "mse_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Concat(Var, Var),
    ConcatCols(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Gelu(Var),
    Sum(Var),
    WeightedSum(Var, Tensor),
    MseOneHot {
        logits: Var,
        target: Tensor,
    },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 3] {
        match self {
            Op::Constant | Op::Param(_) => [None; 3],
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => [Some(*a), Some(*b), None],
            Op::Concat(a, b) | Op::ConcatCols(a, b) => [Some(*a), Some(*b), None],
            Op::LayerNorm { x, gamma, beta, .. } => [Some(*x), Some(*gamma), Some(*beta)],
            Op::Scale(x, _) | Op::Softmax(x) | Op::Gelu(x) | Op::Sum(x) | Op::WeightedSum(x, _) => {
                [Some(*x), None, None]
            }
            Op::SliceRows { x, .. } => [Some(*x), None, None],
            Op::MseOneHot { logits, .. } => [Some(*logits), None, None],
        }
    }

    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat(..) => OpKind::Concat,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sum(_) => OpKind::Sum,
            Op::WeightedSum(..) => OpKind::WeightedSum,
            Op::MseOneHot { .. } => OpKind::MseOneHot,
        }
    }
}

struct Node {
    // `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    // Whether any parameter feeds this node.
    needs_grad: bool,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if the loss depends on it
    /// and the value itself depends on some parameter.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    /// Per-parameter gradients indexed like the store; `None` when unreached.
    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    fault: Option<OpKind>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            fault: None,
        }
    }

    /// Flips the sign of every gradient propagated through ops of `kind`.
    /// Used only to prove that the gradient checker catches broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("only parameter nodes omit their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {}", op.kind());
        let needs_grad = op.inputs().iter().flatten().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a parameter leaf. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_t(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a bias vector (`[n]` or `[1×n]`) to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = xv.cols();
        if bv.numel() != n || xv.rank() != 2 {
            return Err(HstaError::dim("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(HstaError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let d = xv.cols();
        if g.numel() != d || b.numel() != d {
            return Err(HstaError::dim("layer_norm", xv.shape(), g.shape()));
        }
        let (xhat, rstd) = tensor::normalize_rows(xv, eps)?;
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for ((v, gi), bi) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gi + bi;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_rows(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Places `b[m×q]` to the right of `a[m×p]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = tensor::slice_rows(self.value(x), start, len)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Splits `x` into its first `p` rows and the rest.
    pub fn split_rows(&mut self, x: Var, p: usize) -> Result<(Var, Var)> {
        let m = self.value(x).rows();
        if p > m {
            return Err(HstaError::dim("split_rows", self.value(x).shape(), &[p]));
        }
        Ok((self.slice_rows(x, 0, p)?, self.slice_rows(x, p, m - p)?))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ x ⊙ w` for a fixed weight tensor of identical shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(HstaError::dim("weighted_sum", xv.shape(), weights.shape()));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    /// Mean squared error between `logits[1×C]` and the one-hot encoding of `label`.
    pub fn mse_one_hot(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.numel();
        if label >= c {
            return Err(HstaError::Contract(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let mut target = Tensor::zeros(lv.shape());
        target.data_mut()[label] = 1.0;
        let loss = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(l, t)| (l - t) * (l - t))
            .sum::<f64>()
            / c as f64;
        Ok(self.push(Tensor::scalar(loss), Op::MseOneHot { logits, target }))
    }

    /// Propagates d(loss)/d(node) to every node the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut params: Vec<Option<Tensor>> = Vec::with_capacity(self.store.len());
        params.resize_with(self.store.len(), || None);
        if self.nodes.is_empty() {
            return Ok(Gradients { nodes: grads, params });
        }
        if self.value(loss).numel() != 1 {
            return Err(HstaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let sign = if self.fault == Some(node.op.kind()) { -1.0 } else { 1.0 };
            let mut contribs: Vec<(Var, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    params[id.0] = Some(g.clone());
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        contribs.push((*a, tensor::matmul_t(&g, self.value(*b))?));
                    }
                    if self.nodes[b.0].needs_grad {
                        contribs.push((*b, tensor::t_matmul(self.value(*a), &g)?));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        contribs.push((*a, tensor::matmul(&g, self.value(*b))?));
                    }
                    if self.nodes[b.0].needs_grad {
                        contribs.push((*b, tensor::t_matmul(&g, self.value(*a))?));
                    }
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.clone()));
                }
                Op::AddRow(x, bias) => {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let bshape = self.value(*bias).shape().to_vec();
                    contribs.push((*x, g.clone()));
                    contribs.push((*bias, Tensor::new(bshape, gb)?));
                }
                Op::Scale(x, s) => contribs.push((*x, g.scale(*s))),
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax keeps its output");
                    let n = y.cols();
                    let mut gx = Tensor::zeros(y.shape());
                    for ((gx_row, y_row), g_row) in gx
                        .data_mut()
                        .chunks_mut(n.max(1))
                        .zip(y.data().chunks(n.max(1)))
                        .zip(g.data().chunks(n.max(1)))
                    {
                        let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in gx_row.iter_mut().zip(y_row).zip(g_row) {
                            *o = yv * (gv - dot);
                        }
                    }
                    contribs.push((*x, gx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = xhat.cols();
                    let gam = self.value(*gamma);
                    let mut ggamma = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    let mut gx = Tensor::zeros(xhat.shape());
                    let mut dxhat = vec![0.0; d];
                    for (i, r) in rstd.iter().enumerate() {
                        let g_row = &g.data()[i * d..(i + 1) * d];
                        let xh_row = &xhat.data()[i * d..(i + 1) * d];
                        for j in 0..d {
                            ggamma[j] += g_row[j] * xh_row[j];
                            gbeta[j] += g_row[j];
                            dxhat[j] = g_row[j] * gam.data()[j];
                        }
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat = dxhat.iter().zip(xh_row).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let gx_row = &mut gx.data_mut()[i * d..(i + 1) * d];
                        for j in 0..d {
                            gx_row[j] = r * (dxhat[j] - mean_dxhat - xh_row[j] * mean_dxhat_xhat);
                        }
                    }
                    contribs.push((*x, gx));
                    let gshape = gam.shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    contribs.push((*gamma, Tensor::new(gshape, ggamma)?));
                    contribs.push((*beta, Tensor::new(bshape, gbeta)?));
                }
                Op::Concat(a, b) => {
                    let p = self.value(*a).rows();
                    let (ga, gb) = tensor::split_rows(&g, p)?;
                    contribs.push((*a, ga));
                    contribs.push((*b, gb));
                }
                Op::ConcatCols(a, b) => {
                    let p = self.value(*a).cols();
                    let q = self.value(*b).cols();
                    let mut ga = Vec::with_capacity(g.rows() * p);
                    let mut gb = Vec::with_capacity(g.rows() * q);
                    for row in g.data().chunks((p + q).max(1)) {
                        ga.extend_from_slice(&row[..p]);
                        gb.extend_from_slice(&row[p..]);
                    }
                    contribs.push((*a, Tensor::new(vec![g.rows(), p], ga)?));
                    contribs.push((*b, Tensor::new(vec![g.rows(), q], gb)?));
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    gx.data_mut()[start * d..start * d + g.numel()].copy_from_slice(g.data());
                    contribs.push((*x, gx));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, gi)| gi * tensor::gelu_grad(xi))
                        .collect();
                    contribs.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    contribs.push((*x, Tensor::full(self.value(*x).shape(), s)));
                }
                Op::WeightedSum(x, w) => {
                    contribs.push((*x, w.scale(g.data()[0])));
                }
                Op::MseOneHot { logits, target } => {
                    let lv = self.value(*logits);
                    let c = lv.numel() as f64;
                    let s = g.data()[0] * 2.0 / c;
                    let data = lv.data().iter().zip(target.data()).map(|(l, t)| s * (l - t)).collect();
                    contribs.push((*logits, Tensor::new(lv.shape().to_vec(), data)?));
                }
            }
            for (target, mut contrib) in contribs {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                if sign < 0.0 {
                    contrib = contrib.scale(-1.0);
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Runs `backward` and accumulates the parameter gradients into `store`.
/// The closure builds the forward pass and returns the loss node.
pub fn backward_into<F>(store: &mut ParamStore, forward: F) -> Result<f64>
where
    F: for<'a> FnOnce(&mut Tape<'a>) -> Result<Var>,
{
    let (loss, grads) = {
        let mut tape = Tape::new(store);
        let loss = forward(&mut tape)?;
        let grads = tape.backward(loss)?;
        (tape.value(loss).data()[0], grads)
    };
    store.accumulate(grads.params());
    Ok(loss)
}
