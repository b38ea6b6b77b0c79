use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{arg_err, Result};
use crate::numerics::kernels;
use crate::numerics::ops;
use crate::numerics::{Gradients, ParamStore, Scalar, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddBias(NodeId, NodeId),
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(NodeId),
    Softmax(NodeId, usize),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        count: usize,
    },
    Mse(NodeId, NodeId),
    Sum(NodeId),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded tensor operations supporting one reverse-mode sweep.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_ids: HashMap<String, NodeId>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Backward<T> {
    pub params: Gradients<T>,
    inputs: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Backward<T> {
    /// Gradient with respect to an input created with `requires_grad = true`.
    pub fn input(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.inputs.get(&id)
    }
}

fn shape2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return arg_err(format!("{what} expects a rank-2 tensor, got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_ids: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite() || matches!(op, Op::Input | Op::Param(_)));
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(t, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.input(t, false)
    }

    /// Records a parameter leaf. Repeated calls with the same name return the
    /// same node so gradients from every use accumulate in one place.
    /// Frozen parameters do not require gradients.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let value = store.shared(name)?;
        let frozen = store.is_frozen(name)?;
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
            requires_grad: !frozen,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = shape2(self.value(a), "matmul")?;
        let (k2, n) = shape2(self.value(b), "matmul")?;
        if k != k2 {
            return arg_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, c)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        shape2(self.value(a), "transpose")?;
        let t = self.value(a).transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return arg_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale(a, s), rg))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return arg_err(format!(
                "bias of length {} for {} columns",
                self.value(bias).len(),
                cols
            ));
        }
        let mut t = self.value(a).clone();
        kernels::add_bias(t.data_mut(), self.value(bias).data());
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenates rank-2 tensors along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return arg_err("concat of nothing");
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let (r, c) = shape2(self.value(p), "concat_cols")?;
            if r != rows {
                return arg_err("concat_cols row counts differ");
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return arg_err("concat of nothing");
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = shape2(self.value(p), "concat_rows")?;
            if c != cols {
                return arg_err("concat_rows column counts differ");
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows by index (repeats allowed). Doubles as embedding lookup.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let n = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return arg_err(format!("row index {bad} out of range for {n} rows"));
        }
        let t = self.value(a).select_rows(idx);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.gather_rows(table, ids)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (rows, cols) = shape2(self.value(x), "layer_norm")?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return arg_err("layer_norm affine parameters have the wrong length");
        }
        let mut out = vec![T::zero(); rows * cols];
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        {
            let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
            for i in 0..rows {
                let r = kernels::layer_norm_row(
                    xv.row(i),
                    g.data(),
                    b.data(),
                    &mut out[i * cols..(i + 1) * cols],
                    &mut xhat[i * cols..(i + 1) * cols],
                );
                rstd.push(r);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x).map(kernels::gelu);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gelu(x), rg))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = ops::softmax(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x, axis), rg))
    }

    /// 1-D convolution over a `[time × channels_in]` sequence.
    ///
    /// `w` is `[kernel·channels_in × channels_out]`, `b` is `[channels_out]`.
    /// Zero padding of `(kernel − 1) / 2` on both sides gives an output length
    /// of `⌈time / stride⌉` for odd kernels.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (t_in, c_in) = shape2(self.value(x), "conv1d")?;
        let (wk, c_out) = shape2(self.value(w), "conv1d weight")?;
        if kernel == 0 || stride == 0 {
            return arg_err("conv1d kernel and stride must be positive");
        }
        if wk != kernel * c_in || self.value(b).len() != c_out {
            return arg_err("conv1d parameter shapes do not match");
        }
        if t_in == 0 {
            return arg_err("conv1d on an empty sequence");
        }
        let pad = (kernel - 1) / 2;
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let cols = ops::im2col(self.value(x).data(), t_in, c_in, kernel, stride, pad, t_out);
        let mut y = kernels::matmul(&cols, self.value(w).data(), t_out, wk, c_out);
        kernels::add_bias(&mut y, self.value(b).data());
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::matrix(t_out, c_out, y)?,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `[time × d]` projections.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> Result<NodeId> {
        let (t, d) = shape2(self.value(q), "attention")?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] {
            return arg_err("attention q/k/v shapes differ");
        }
        if heads == 0 || d % heads != 0 {
            return arg_err(format!("{d} features cannot be split into {heads} heads"));
        }
        let mut out = vec![T::zero(); t * d];
        let mut probs = vec![T::zero(); heads * t * t];
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            let mut p = vec![T::zero(); heads * t];
            for i in 0..t {
                let visible = if causal { i + 1 } else { t };
                kernels::attention_row(
                    qv.row(i),
                    kv.data(),
                    vv.data(),
                    visible,
                    heads,
                    &mut out[i * d..(i + 1) * d],
                    Some(&mut p[..heads * visible]),
                );
                for h in 0..heads {
                    let dst = &mut probs[(h * t + i) * t..(h * t + i) * t + visible];
                    dst.copy_from_slice(&p[h * visible..(h + 1) * visible]);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(t, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy; rows whose target equals `ignore` are masked.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], ignore: usize) -> Result<NodeId> {
        let (loss, probs, count) = ops::cross_entropy_parts(self.value(logits), targets, ignore)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len().max(1);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s / T::from_usize(n)), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Reverse-mode sweep from a scalar node.
    ///
    /// Every unfrozen parameter recorded in the graph receives a gradient
    /// entry (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Result<Backward<T>> {
        if self.value(loss).len() != 1 {
            return arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        let mut params = Gradients::new();
        let mut inputs = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Param(name) => {
                    let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                    params.insert(name.clone(), g);
                }
                Op::Input => {
                    let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                    inputs.insert(NodeId(i), g);
                }
                _ => {}
            }
        }
        // Parameters recorded after the loss node cannot influence it.
        for node in self.nodes.iter().skip(loss.0 + 1) {
            if let (Op::Param(name), true) = (&node.op, node.requires_grad) {
                params.insert(name.clone(), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Backward { params, inputs })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>| {
            match &mut grads[id.0] {
                Some(t) => {
                    for (a, &b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let da = kernels::matmul_nt(gd, self.value(*b).data(), m, n, k);
                    acc(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.needs(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), gd, m, k, n);
                    acc(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    acc(grads, *a, g.transpose());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    acc(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    acc(grads, *a, g.map(|x| x * *s));
                }
            }
            Op::AddBias(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone().reshape(self.value(*a).shape().to_vec())?);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                        }
                        acc(grads, p, Tensor::matrix(rows, c, d)?);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        let d = gd[off..off + n].to_vec();
                        acc(grads, p, Tensor::new(self.value(p).shape().to_vec(), d)?);
                    }
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                if self.needs(*a) {
                    let mut d = Tensor::zeros(self.value(*a).shape());
                    let c = d.cols();
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = d.row_mut(src);
                        for (x, &y) in dst.iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *x += y;
                        }
                    }
                    acc(grads, *a, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let v = gd[r * cols + c];
                            dg[c] += v * xhat[r * cols + c];
                            db[c] += v;
                        }
                    }
                    if self.needs(*gamma) {
                        acc(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?);
                    }
                    if self.needs(*beta) {
                        acc(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?);
                    }
                }
                if self.needs(*x) {
                    let n = T::from_usize(cols);
                    let mut dx = vec![T::zero(); rows * cols];
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            let v = gd[r * cols + c] * gam[c];
                            dxhat[c] = v;
                            s1 += v;
                            s2 += v * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            dx[r * cols + c] =
                                rstd[r] / n * (n * dxhat[c] - s1 - xhat[r * cols + c] * s2);
                        }
                    }
                    acc(grads, *x, Tensor::matrix(rows, cols, dx)?);
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let d = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                        .collect();
                    acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Softmax(x, axis) => {
                if self.needs(*x) {
                    let y = &self.nodes[i].value;
                    let (outer, len, inner) = ops::axis_split(y.shape(), *axis);
                    let yd = y.data();
                    let mut dx = vec![T::zero(); yd.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + j;
                            let mut dotp = T::zero();
                            for l in 0..len {
                                dotp += gd[at(l)] * yd[at(l)];
                            }
                            for l in 0..len {
                                dx[at(l)] = yd[at(l)] * (gd[at(l)] - dotp);
                            }
                        }
                    }
                    acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let (t_out, c_out) = (g.rows(), g.cols());
                let (t_in, c_in) = (self.value(*x).rows(), self.value(*x).cols());
                let wk = kernel * c_in;
                if self.needs(*w) {
                    let dw = kernels::matmul_tn(cols, gd, t_out, wk, c_out);
                    acc(grads, *w, Tensor::matrix(wk, c_out, dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); c_out];
                    for row in gd.chunks(c_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
                if self.needs(*x) {
                    let dcols = kernels::matmul_nt(gd, self.value(*w).data(), t_out, c_out, wk);
                    let dx = ops::col2im(&dcols, t_in, c_in, *kernel, *stride, *pad, t_out);
                    acc(grads, *x, Tensor::matrix(t_in, c_in, dx)?);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => {
                let (t, d) = (g.rows(), g.cols());
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); t * d];
                let mut dk = vec![T::zero(); t * d];
                let mut dv = vec![T::zero(); t * d];
                let mut dp = vec![T::zero(); t];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t {
                        let visible = if *causal { i + 1 } else { t };
                        let p = &probs[(h * t + i) * t..(h * t + i) * t + visible];
                        let go = &gd[i * d + off..i * d + off + dh];
                        let mut s = T::zero();
                        for j in 0..visible {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = kernels::dot(go, vj);
                            s += p[j] * dp[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (x, &y) in dvj.iter_mut().zip(go) {
                                *x += p[j] * y;
                            }
                        }
                        for j in 0..visible {
                            let ds = p[j] * (dp[j] - s) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kd[j * d + off + c];
                                dk[j * d + off + c] += ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    acc(grads, *q, Tensor::matrix(t, d, dq)?);
                }
                if self.needs(*k) {
                    acc(grads, *k, Tensor::matrix(t, d, dk)?);
                }
                if self.needs(*v) {
                    acc(grads, *v, Tensor::matrix(t, d, dv)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if self.needs(*logits) {
                    let (rows, cols) = (self.value(*logits).rows(), self.value(*logits).cols());
                    let mut d = vec![T::zero(); rows * cols];
                    if *count > 0 {
                        let s = gd[0] / T::from_usize(*count);
                        for (r, &tgt) in targets.iter().enumerate() {
                            if tgt == *ignore {
                                continue;
                            }
                            for c in 0..cols {
                                d[r * cols + c] = probs[r * cols + c] * s;
                            }
                            d[r * cols + tgt] -= s;
                        }
                    }
                    acc(grads, *logits, Tensor::matrix(rows, cols, d)?);
                }
            }
            Op::Mse(a, b) => {
                let n = T::from_usize(self.value(*a).len().max(1));
                let s = gd[0] * T::lit(2.0) / n;
                let diff: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| (x - y) * s)
                    .collect();
                let shape = self.value(*a).shape().to_vec();
                if self.needs(*b) {
                    acc(grads, *b, Tensor::new(shape.clone(), diff.iter().map(|&x| -x).collect())?);
                }
                if self.needs(*a) {
                    acc(grads, *a, Tensor::new(shape, diff)?);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    acc(grads, *a, Tensor::full(self.value(*a).shape(), gd[0]));
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> std::fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}
