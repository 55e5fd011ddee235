//! Tape-recorded reverse-mode differentiation.
//!
//! Every op appends a node to the tape; `backward` walks the tape in exact
//! reverse order. A fresh [`Graph`] is built for each training step.

use std::sync::Arc;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::scalar::{axpy_wide, dot, Scalar};

use super::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable op set.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// Same-shape sum, or a bias row broadcast over the rows of the first input.
    Add,
    Scale(f64),
    /// Row-wise softmax over the last dimension.
    SoftmaxRows,
    /// Row-wise softmax of a square matrix restricted to columns `<= row`.
    CausalSoftmaxRows,
    /// Inputs: `x`, `gain`, `bias`; normalizes over the last dimension.
    LayerNorm,
    Gelu,
    /// Inputs: embedding table; output rows are `table[ids[i]]`.
    EmbedLookup(Vec<usize>),
    ConcatRows,
    SliceRows { start: usize, end: usize },
    Transpose,
    SliceCols { start: usize, end: usize },
    ConcatCols,
    /// Rows of the input at the given indices.
    GatherRows(Vec<usize>),
    Sum,
    /// Sum over `(row, target)` pairs of `-log softmax(row)[target]`, divided by `denom`.
    MaskedNll {
        targets: Vec<(usize, usize)>,
        denom: f64,
    },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::CausalSoftmaxRows => "causal_softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::EmbedLookup(_) => "embed_lookup",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::Transpose => "transpose",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::Sum => "sum",
            OpKind::MaskedNll { .. } => "masked_nll",
        }
    }
}

#[derive(Debug)]
enum Saved {
    None,
    /// Per-row `(mean, rstd)`.
    Norm(Vec<(f64, f64)>),
    /// Softmax probabilities of each supervised row, flattened.
    Probs(Vec<f64>),
}

#[derive(Debug)]
struct Node<S> {
    op: Option<OpKind>,
    inputs: Vec<usize>,
    value: Arc<Tensor<S>>,
    requires_grad: bool,
    saved: Saved,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `v`; zeros when `v` is unreachable from the loss.
    pub fn get(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed gradient data, `None` when unreachable.
    pub fn raw(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads[v.0].take()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Leaf backed by a shared buffer; no copy is made.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<S>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad,
            saved: Saved::None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` as a constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = Arc::clone(&self.nodes[v.0].value);
        self.leaf_shared(t, false)
    }

    /// Executes `kind` on `inputs` and records it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let (value, saved) = self.forward_op(&kind, inputs)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {} (node {})",
                kind.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Some(kind),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value: Arc::new(value),
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SoftmaxRows, &[a])
    }

    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::CausalSoftmaxRows, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::LayerNorm, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[a])
    }

    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(OpKind::EmbedLookup(ids.to_vec()), &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows { start, end }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceCols { start, end }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatCols, parts)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.apply(OpKind::GatherRows(idx.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn masked_nll(&mut self, logits: Var, targets: &[(usize, usize)], denom: f64) -> Result<Var> {
        self.apply(
            OpKind::MaskedNll {
                targets: targets.to_vec(),
                denom,
            },
            &[logits],
        )
    }

    fn matrix_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(dim_err!("{op} expects a matrix, got shape {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    fn arity(kind: &OpKind, inputs: &[Var]) -> Result<()> {
        let want = match kind {
            OpKind::MatMul | OpKind::Add => Some(2),
            OpKind::LayerNorm => Some(3),
            OpKind::ConcatRows | OpKind::ConcatCols => None,
            _ => Some(1),
        };
        match want {
            Some(n) if inputs.len() != n => Err(dim_err!(
                "{} takes {} inputs, got {}",
                kind.name(),
                n,
                inputs.len()
            )),
            None if inputs.is_empty() => Err(dim_err!("{} needs at least one input", kind.name())),
            _ => Ok(()),
        }
    }

    fn forward_op(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor<S>, Saved)> {
        Self::arity(kind, inputs)?;
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let out = match kind {
            OpKind::MatMul => {
                let (m, k) = self.matrix_dims(inputs[0], "matmul")?;
                let (k2, n) = self.matrix_dims(inputs[1], "matmul")?;
                if k != k2 {
                    return Err(dim_err!("matmul [{m},{k}] x [{k2},{n}]"));
                }
                Tensor::new(vec![m, n], matmul(val(0).data(), val(1).data(), m, k, n))?
            }
            OpKind::Add => {
                let (a, b) = (val(0), val(1));
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
                    Tensor::new(a.shape().to_vec(), data)?
                } else if is_bias_row(b.shape(), a.cols()) && a.shape().len() == 2 {
                    let c = a.cols();
                    let bias = b.data();
                    let data = a
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| *x + bias[i % c])
                        .collect();
                    Tensor::new(a.shape().to_vec(), data)?
                } else {
                    return Err(dim_err!("add {:?} + {:?}", a.shape(), b.shape()));
                }
            }
            OpKind::Scale(c) => {
                let a = val(0);
                let c = S::narrow(*c);
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| *x * c).collect())?
            }
            OpKind::SoftmaxRows | OpKind::CausalSoftmaxRows => {
                let a = val(0);
                let causal = matches!(kind, OpKind::CausalSoftmaxRows);
                let (rows, cols) = (a.rows(), a.cols());
                if a.shape().is_empty() || (causal && (a.shape().len() != 2 || rows != cols)) {
                    return Err(dim_err!("{} on shape {:?}", kind.name(), a.shape()));
                }
                let mut data = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let width = if causal { r + 1 } else { cols };
                    softmax_into(&a.row(r)[..width], &mut data[r * cols..r * cols + width]);
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            OpKind::LayerNorm => {
                let (x, g, b) = (val(0), val(1), val(2));
                let c = x.cols();
                if !is_bias_row(g.shape(), c) || !is_bias_row(b.shape(), c) {
                    return Err(dim_err!(
                        "layer_norm x {:?}, gain {:?}, bias {:?}",
                        x.shape(),
                        g.shape(),
                        b.shape()
                    ));
                }
                let mut stats = Vec::with_capacity(x.rows());
                let mut data = vec![S::zero(); x.numel()];
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mean = row.iter().map(|v| v.widen()).sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / c as f64;
                    let rstd = 1.0 / (var + LN_EPS).sqrt();
                    for j in 0..c {
                        let xhat = (row[j].widen() - mean) * rstd;
                        data[r * c + j] = S::narrow(xhat * g.data()[j].widen() + b.data()[j].widen());
                    }
                    stats.push((mean, rstd));
                }
                return Ok((Tensor::new(x.shape().to_vec(), data)?, Saved::Norm(stats)));
            }
            OpKind::Gelu => {
                let a = val(0);
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().map(|x| S::narrow(gelu(x.widen()))).collect(),
                )?
            }
            OpKind::EmbedLookup(ids) => {
                let t = val(0);
                let (v, d) = self.matrix_dims(inputs[0], "embed_lookup")?;
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(dim_err!("embedding id {id} out of range for table of {v} rows"));
                    }
                    data.extend_from_slice(t.row(id));
                }
                Tensor::new(vec![ids.len(), d], data)?
            }
            OpKind::ConcatRows => {
                let c = val(0).cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for (i, v) in inputs.iter().enumerate() {
                    let (r, cc) = self.matrix_dims(*v, "concat_rows")?;
                    if cc != c {
                        return Err(dim_err!("concat_rows width {cc} != {c} at input {i}"));
                    }
                    rows += r;
                    data.extend_from_slice(val(i).data());
                }
                Tensor::new(vec![rows, c], data)?
            }
            OpKind::SliceRows { start, end } => {
                let (r, c) = self.matrix_dims(inputs[0], "slice_rows")?;
                if start > end || *end > r {
                    return Err(dim_err!("slice_rows {start}..{end} of {r} rows"));
                }
                Tensor::new(vec![end - start, c], val(0).data()[start * c..end * c].to_vec())?
            }
            OpKind::Transpose => {
                let (r, c) = self.matrix_dims(inputs[0], "transpose")?;
                let a = val(0).data();
                let mut data = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = a[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], data)?
            }
            OpKind::SliceCols { start, end } => {
                let (r, c) = self.matrix_dims(inputs[0], "slice_cols")?;
                if start > end || *end > c {
                    return Err(dim_err!("slice_cols {start}..{end} of {c} cols"));
                }
                let a = val(0);
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&a.row(i)[*start..*end]);
                }
                Tensor::new(vec![r, end - start], data)?
            }
            OpKind::ConcatCols => {
                let r = val(0).rows();
                let mut widths = Vec::with_capacity(inputs.len());
                for v in inputs {
                    let (rr, c) = self.matrix_dims(*v, "concat_cols")?;
                    if rr != r {
                        return Err(dim_err!("concat_cols rows {rr} != {r}"));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for k in 0..inputs.len() {
                        data.extend_from_slice(val(k).row(i));
                    }
                }
                Tensor::new(vec![r, total], data)?
            }
            OpKind::GatherRows(idx) => {
                let (r, c) = self.matrix_dims(inputs[0], "gather_rows")?;
                let a = val(0);
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    if i >= r {
                        return Err(dim_err!("gather_rows index {i} of {r} rows"));
                    }
                    data.extend_from_slice(a.row(i));
                }
                Tensor::new(vec![idx.len(), c], data)?
            }
            OpKind::Sum => Tensor::scalar(S::narrow(val(0).data().iter().map(|v| v.widen()).sum())),
            OpKind::MaskedNll { targets, denom } => {
                let (r, v) = self.matrix_dims(inputs[0], "masked_nll")?;
                if *denom <= 0.0 {
                    return Err(contract_err!("masked_nll denominator must be positive"));
                }
                let logits = val(0);
                let mut probs = Vec::with_capacity(targets.len() * v);
                let mut total = 0.0f64;
                for &(row, tgt) in targets {
                    if row >= r || tgt >= v {
                        return Err(dim_err!("nll target ({row},{tgt}) outside [{r},{v}]"));
                    }
                    let x = logits.row(row);
                    let max = x.iter().map(|a| a.widen()).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = x.iter().map(|a| (a.widen() - max).exp()).sum();
                    let lse = max + z.ln();
                    total += lse - x[tgt].widen();
                    probs.extend(x.iter().map(|a| (a.widen() - lse).exp()));
                }
                return Ok((Tensor::scalar(S::narrow(total / denom)), Saved::Probs(probs)));
            }
        };
        Ok((out, Saved::None))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(contract_err!("backward on an empty graph"));
        }
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, op, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_op(&self, id: usize, op: &OpKind, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let inp = &node.inputs;
        let needs = |i: usize| self.nodes[inp[i]].requires_grad;
        let val = |i: usize| &self.nodes[inp[i]].value;
        match op {
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, nn) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if needs(0) {
                    // dA = G * B^T
                    let ga = accum(grads, inp[0], m * k);
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let d = dot(grow, &b.data()[p * nn..(p + 1) * nn]);
                            ga[i * k + p] = S::narrow(ga[i * k + p].widen() + d);
                        }
                    }
                }
                if needs(1) {
                    // dB = A^T * G
                    let mut acc = vec![0.0f64; k * nn];
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let av = a.data()[i * k + p].widen();
                            if av != 0.0 {
                                axpy_wide(&mut acc[p * nn..(p + 1) * nn], av, grow);
                            }
                        }
                    }
                    add_wide(accum(grads, inp[1], k * nn), &acc);
                }
            }
            OpKind::Add => {
                if needs(0) {
                    add_into(accum(grads, inp[0], g.len()), g);
                }
                if needs(1) {
                    let b = val(1);
                    if b.numel() == g.len() {
                        add_into(accum(grads, inp[1], g.len()), g);
                    } else {
                        let c = b.numel();
                        let mut acc = vec![0.0f64; c];
                        for row in g.chunks_exact(c) {
                            axpy_wide(&mut acc, 1.0, row);
                        }
                        add_wide(accum(grads, inp[1], c), &acc);
                    }
                }
            }
            OpKind::Scale(c) => {
                if needs(0) {
                    let c = S::narrow(*c);
                    for (a, v) in accum(grads, inp[0], g.len()).iter_mut().zip(g) {
                        *a = *a + *v * c;
                    }
                }
            }
            OpKind::SoftmaxRows | OpKind::CausalSoftmaxRows => {
                if needs(0) {
                    let y = &node.value;
                    let cols = y.cols();
                    let gx = accum(grads, inp[0], g.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = dot(yr, gr);
                        for j in 0..cols {
                            let yj = yr[j].widen();
                            if yj != 0.0 {
                                let idx = r * cols + j;
                                gx[idx] = S::narrow(gx[idx].widen() + yj * (gr[j].widen() - s));
                            }
                        }
                    }
                }
            }
            OpKind::LayerNorm => {
                let Saved::Norm(stats) = &node.saved else {
                    unreachable!("layer_norm without saved stats")
                };
                let (x, gain) = (val(0), val(1));
                let c = x.cols();
                let mut ggain = vec![0.0f64; c];
                let mut gbias = vec![0.0f64; c];
                let mut gx = vec![S::zero(); x.numel()];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let row = x.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let xhat = (row[j].widen() - mean) * rstd;
                        let gy = gr[j].widen();
                        ggain[j] += gy * xhat;
                        gbias[j] += gy;
                        let d = gy * gain.data()[j].widen();
                        sum_d += d;
                        sum_dx += d * xhat;
                    }
                    let (mean_d, mean_dx) = (sum_d / c as f64, sum_dx / c as f64);
                    for j in 0..c {
                        let xhat = (row[j].widen() - mean) * rstd;
                        let d = gr[j].widen() * gain.data()[j].widen();
                        gx[r * c + j] = S::narrow(rstd * (d - mean_d - xhat * mean_dx));
                    }
                }
                if needs(0) {
                    add_into(accum(grads, inp[0], gx.len()), &gx);
                }
                if needs(1) {
                    add_wide(accum(grads, inp[1], c), &ggain);
                }
                if needs(2) {
                    add_wide(accum(grads, inp[2], c), &gbias);
                }
            }
            OpKind::Gelu => {
                if needs(0) {
                    let x = val(0).data();
                    let gx = accum(grads, inp[0], g.len());
                    for i in 0..g.len() {
                        gx[i] = S::narrow(gx[i].widen() + g[i].widen() * gelu_grad(x[i].widen()));
                    }
                }
            }
            OpKind::EmbedLookup(ids) | OpKind::GatherRows(ids) => {
                if needs(0) {
                    let c = val(0).cols();
                    let gt = accum(grads, inp[0], val(0).numel());
                    for (i, &row) in ids.iter().enumerate() {
                        add_into(&mut gt[row * c..(row + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            OpKind::ConcatRows => {
                let mut off = 0;
                for (i, &src) in inp.iter().enumerate() {
                    let len = val(i).numel();
                    if needs(i) {
                        add_into(accum(grads, src, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            OpKind::SliceRows { start, .. } => {
                if needs(0) {
                    let c = val(0).cols();
                    let gx = accum(grads, inp[0], val(0).numel());
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            OpKind::Transpose => {
                if needs(0) {
                    let (r, c) = (val(0).shape()[0], val(0).shape()[1]);
                    let gx = accum(grads, inp[0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            OpKind::SliceCols { start, end } => {
                if needs(0) {
                    let (r, c) = (val(0).shape()[0], val(0).shape()[1]);
                    let w = end - start;
                    let gx = accum(grads, inp[0], r * c);
                    for i in 0..r {
                        add_into(&mut gx[i * c + start..i * c + end], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            OpKind::ConcatCols => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for (k, &src) in inp.iter().enumerate() {
                    let w = val(k).cols();
                    if needs(k) {
                        let gx = accum(grads, src, rows * w);
                        for i in 0..rows {
                            add_into(&mut gx[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            OpKind::Sum => {
                if needs(0) {
                    let g0 = g[0];
                    for a in accum(grads, inp[0], val(0).numel()).iter_mut() {
                        *a = *a + g0;
                    }
                }
            }
            OpKind::MaskedNll { targets, denom } => {
                if needs(0) {
                    let Saved::Probs(probs) = &node.saved else {
                        unreachable!("masked_nll without saved probabilities")
                    };
                    let v = val(0).cols();
                    let scale = g[0].widen() / denom;
                    let gx = accum(grads, inp[0], val(0).numel());
                    for (t, &(row, tgt)) in targets.iter().enumerate() {
                        let p = &probs[t * v..(t + 1) * v];
                        for j in 0..v {
                            let onehot = if j == tgt { 1.0 } else { 0.0 };
                            let idx = row * v + j;
                            gx[idx] = S::narrow(gx[idx].widen() + scale * (p[j] - onehot));
                        }
                    }
                }
            }
        }
    }
}

fn is_bias_row(shape: &[usize], cols: usize) -> bool {
    match shape {
        [c] => *c == cols,
        [1, c] => *c == cols,
        _ => false,
    }
}

fn accum<S: Scalar>(grads: &mut [Option<Vec<S>>], id: usize, len: usize) -> &mut Vec<S> {
    grads[id].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn add_wide<S: Scalar>(dst: &mut [S], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = S::narrow(d.widen() + s);
    }
}

/// `[m,k] x [k,n]` with `f64` row accumulators. Zero entries of `a` are skipped,
/// which halves the work for causal attention weights.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = a[i * k + p].widen();
            if av != 0.0 {
                axpy_wide(&mut acc, av, &b[p * n..(p + 1) * n]);
            }
        }
        out.extend(acc.iter().map(|v| S::narrow(*v)));
    }
    out
}

fn softmax_into<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0f64;
    let mut tmp = Vec::with_capacity(x.len());
    for v in x {
        let e = (v.widen() - max).exp();
        z += e;
        tmp.push(e);
    }
    for (o, e) in out.iter_mut().zip(tmp) {
        *o = S::narrow(e / z);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
