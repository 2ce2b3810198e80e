//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] replays the tape in reverse and
//! consumes the graph. With gradients disabled the same code path runs as a
//! plain forward evaluator and no leaf requires a gradient.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`]. Only valid for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Sigmoid(Var),
    Huber(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Gather(Var, Arc<Vec<usize>>),
    Reshape(Var),
    Sum(Var),
    MaxLastDim(Var, Vec<usize>),
    NormalizeRows(Var, Vec<T>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    dead_softmax_rows: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that tracks gradients for parameter leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            dead_softmax_rows: 0,
        }
    }

    /// A forward-only graph: nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of softmax rows seen so far whose entries were all masked.
    pub fn dead_softmax_rows(&self) -> usize {
        self.dead_softmax_rows
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// A trainable leaf. Requires a gradient unless the graph is forward-only.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// A trainable leaf sharing storage with the caller.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn as_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let k = self.data(s)[0];
        let t = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::ScaleBy(x, s), rg))
    }

    /// `x[r, c] + b[c]`: the one explicit row-vector broadcast (bias add).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2();
        if self.value(b).numel() != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % cols])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, x: Var, delta: T) -> Var {
        self.unary(x, |v| kernels::huber(v, delta), Op::Huber(x, delta))
    }

    /// Softmax over the last dim of `x + mask`. Fully masked rows become zeros
    /// and are logged once per graph.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if let Some(m) = mask {
            if m.numel() != cols && m.numel() != rows * cols {
                return Err(Error::shape("softmax", self.shape(x), m.shape()));
            }
        }
        let (out, dead) = kernels::softmax_rows(self.data(x), cols, mask.map(|m| m.data()));
        if dead > 0 {
            if self.dead_softmax_rows == 0 {
                log::warn!("softmax: {dead} fully masked row(s) mapped to zeros");
            }
            self.dead_softmax_rows += dead;
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gain)));
        }
        let (y, xhat, rstd) = kernels::layernorm(self.data(x), cols, self.data(gain), self.data(bias));
        let t = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Stacks 2-D values along rows (token concatenation).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&refs)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Stacks 2-D values along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols of zero tensors"));
        };
        let rows = self.value(first).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if start + len > cols {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of {cols} columns",
                start + len
            )));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as_matrix("transpose", x)?;
        let t = Tensor::new(vec![c, r], kernels::transpose(self.data(x), r, c))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", &[index.len()], &shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("gather index {bad} out of {n}")));
        }
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gather(x, index), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row-wise maximum over the last dim, shape `rows × 1`.
    pub fn max_lastdim(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if cols == 0 {
            return Err(Error::invalid("max over an empty dimension"));
        }
        let src = self.data(x);
        let mut arg = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mut best = 0;
            for j in 1..cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let t = Tensor::new(vec![rows, 1], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxLastDim(x, arg), rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        let src = self.data(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::invalid("normalize_rows: zero-norm row"));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::NormalizeRows(x, norms), rg))
    }

    /// Replays the tape in reverse from the scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let values = self
            .nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| match (node.requires_grad, g) {
                (true, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                (true, None) => Some(Tensor::zeros(node.value.shape().to_vec())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: values })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: &dyn Fn(usize) -> T| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            for (k, s) in slot.iter_mut().enumerate() {
                *s += contrib(k);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).dims2().1;
                if self.nodes[a.0].requires_grad {
                    let da = kernels::matmul_nt(g, self.data(b), m, n, k);
                    acc(a, &|j| da[j]);
                }
                if self.nodes[b.0].requires_grad {
                    let db = kernels::matmul_tn(self.data(a), g, m, k, n);
                    acc(b, &|j| db[j]);
                }
            }
            &Op::Add(a, b) => {
                acc(a, &|j| g[j]);
                acc(b, &|j| g[j]);
            }
            &Op::Sub(a, b) => {
                acc(a, &|j| g[j]);
                acc(b, &|j| -g[j]);
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                acc(a, &|j| g[j] * db[j]);
                acc(b, &|j| g[j] * da[j]);
            }
            &Op::Scale(x, s) => acc(x, &|j| g[j] * s),
            &Op::AddScalar(x) => acc(x, &|j| g[j]),
            &Op::ScaleBy(x, s) => {
                let k = self.data(s)[0];
                acc(x, &|j| g[j] * k);
                let xd = self.data(x);
                let total = g.iter().zip(xd).map(|(&a, &b)| a * b).sum::<T>();
                acc(s, &|_| total);
            }
            &Op::AddRow(x, b) => {
                acc(x, &|j| g[j]);
                let cols = self.value(b).numel();
                let mut db = vec![T::zero(); cols];
                for (j, &v) in g.iter().enumerate() {
                    db[j % cols] += v;
                }
                acc(b, &|j| db[j]);
            }
            &Op::Gelu(x) => {
                let xd = self.data(x);
                acc(x, &|j| g[j] * kernels::gelu_grad(xd[j]));
            }
            &Op::Exp(x) => acc(x, &|j| g[j] * out[j]),
            &Op::Log(x) => {
                let xd = self.data(x);
                acc(x, &|j| g[j] / xd[j]);
            }
            &Op::Abs(x) => {
                let xd = self.data(x);
                acc(x, &|j| g[j] * kernels::sign(xd[j]));
            }
            &Op::Softplus(x) => {
                let xd = self.data(x);
                acc(x, &|j| g[j] * kernels::sigmoid(xd[j]));
            }
            &Op::Sigmoid(x) => acc(x, &|j| g[j] * out[j] * (T::one() - out[j])),
            &Op::Huber(x, delta) => {
                let xd = self.data(x);
                acc(x, &|j| g[j] * kernels::huber_grad(xd[j], delta));
            }
            &Op::Softmax(x) => {
                let (rows, cols) = node.value.dims2();
                let mut dx = vec![T::zero(); out.len()];
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gy = &g[r * cols..(r + 1) * cols];
                    let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..cols {
                        dx[r * cols + j] = y[j] * (gy[j] - dot);
                    }
                }
                acc(x, &|j| dx[j]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gain).numel();
                let rows = xhat.len() / cols;
                let gd = self.data(*gain);
                let n = T::lit(cols as f64);
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dgain = vec![T::zero(); cols];
                let mut dbias = vec![T::zero(); cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..cols {
                        let dh = g[base + j] * gd[j];
                        mean_d += dh;
                        mean_dx += dh * xhat[base + j];
                        dgain[j] += g[base + j] * xhat[base + j];
                        dbias[j] += g[base + j];
                    }
                    mean_d = mean_d / n;
                    mean_dx = mean_dx / n;
                    for j in 0..cols {
                        let dh = g[base + j] * gd[j];
                        dx[base + j] = rstd[r] * (dh - mean_d - xhat[base + j] * mean_dx);
                    }
                }
                acc(*x, &|j| dx[j]);
                acc(*gain, &|j| dgain[j]);
                acc(*bias, &|j| dbias[j]);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &|j| g[offset + j]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().1;
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    acc(p, &|j| g[(j / w) * total + start + j % w]);
                    start += w;
                }
            }
            &Op::SliceRows(x, start) => {
                let cols = self.value(x).dims2().1;
                let (lo, hi) = (start * cols, start * cols + g.len());
                acc(x, &|j| if j >= lo && j < hi { g[j - lo] } else { T::zero() });
            }
            &Op::SliceCols(x, start) => {
                let cols = self.value(x).dims2().1;
                let w = node.value.dims2().1;
                acc(x, &|j| {
                    let (r, c) = (j / cols, j % cols);
                    if c >= start && c < start + w {
                        g[r * w + c - start]
                    } else {
                        T::zero()
                    }
                });
            }
            &Op::Transpose(x) => {
                let (r, c) = self.value(x).dims2();
                let dx = kernels::transpose(g, c, r);
                acc(x, &|j| dx[j]);
            }
            Op::Gather(x, index) => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (k, &src) in index.iter().enumerate() {
                    dx[src] += g[k];
                }
                acc(*x, &|j| dx[j]);
            }
            &Op::Reshape(x) => acc(x, &|j| g[j]),
            &Op::Sum(x) => acc(x, &|_| g[0]),
            Op::MaxLastDim(x, arg) => {
                let cols = self.value(*x).dims2().1;
                acc(*x, &|j| {
                    let (r, c) = (j / cols, j % cols);
                    if arg[r] == c {
                        g[r]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::NormalizeRows(x, norms) => {
                let cols = node.value.dims2().1;
                let mut dx = vec![T::zero(); out.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gy = &g[r * cols..(r + 1) * cols];
                    let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..cols {
                        dx[r * cols + j] = (gy[j] - y[j] * dot) / n;
                    }
                }
                acc(*x, &|j| dx[j]);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by the original vars.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
