//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every primitive appends one node holding its value
//! and the handles of its inputs. [`Graph::backward`] walks the tape in
//! reverse once, accumulating each node's gradient before it is propagated,
//! so a tensor consumed twice receives the sum of both contributions.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::tensor::numel;
use super::{NumError, Result, Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    graph: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Relu,
    Silu,
    Tanh,
}

enum Op<T: Scalar> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Pow(Var, T),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    L2Normalize { x: Var, inv_norm: Vec<T> },
    LayerNorm { x: Var, rstd: Vec<T> },
    Softmax(Var),
    Gather { x: Var, index: Arc<Vec<usize>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The gradient tape for one evaluation.
pub struct Graph<T: Scalar> {
    id: u32,
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: the gradient of every node that needed one.
pub struct Gradients<T: Scalar> {
    graph: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(NumError::NotOnTape);
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str, inputs: &[Var]) -> Result<Var> {
        let mut value = value.check_finite(op_name)?;
        value.requires_grad = false;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.idx].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { idx: self.nodes.len() - 1, graph: self.id })
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        let rg = t.requires_grad;
        let mut t = t.check_finite("leaf")?;
        t.requires_grad = false;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: rg });
        Ok(Var { idx: self.nodes.len() - 1, graph: self.id })
    }

    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        let (name, out) = match kind {
            BinaryKind::Add => ("add", va.zip_with(vb, "add", |x, y| x + y)?),
            BinaryKind::Sub => ("sub", va.zip_with(vb, "sub", |x, y| x - y)?),
            BinaryKind::Mul => ("mul", va.zip_with(vb, "mul", |x, y| x * y)?),
            BinaryKind::Div => ("div", va.zip_with(vb, "div", |x, y| x / y)?),
        };
        self.push(out, Op::Binary(kind, a, b), name, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.idx].value.map(|v| v + s);
        self.push(out, Op::AddScalar(x), "add_scalar", &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.idx].value.map(|v| v * s);
        self.push(out, Op::MulScalar(x, s), "mul_scalar", &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -T::one())
    }

    pub fn pow(&mut self, x: Var, p: T) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.idx].value.map(|v| v.powf(p));
        self.push(out, Op::Pow(x, p), "pow", &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.idx].value;
        let (name, out) = match kind {
            UnaryKind::Exp => ("exp", v.map(|a| a.exp())),
            UnaryKind::Log => ("log", v.map(|a| a.ln())),
            UnaryKind::Sqrt => ("sqrt", v.map(|a| a.sqrt())),
            UnaryKind::Relu => ("relu", v.map(|a| a.max(T::zero()))),
            UnaryKind::Silu => ("silu", v.map(|a| a / (T::one() + (-a).exp()))),
            UnaryKind::Tanh => ("tanh", v.map(|a| a.tanh())),
        };
        self.push(out, Op::Unary(kind, x), name, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.nodes[x.idx].value.sum());
        self.push(out, Op::Sum(x), "sum", &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.nodes[x.idx].value.mean());
        self.push(out, Op::Mean(x), "mean", &[x])
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.idx].value;
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(NumError::InvalidArgument(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * inner];
        let src = v.data();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::SumAxis(x), "sum_axis", &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        self.mul_scalar(s, T::one() / T::lit(n as f64))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.nodes[a.idx].value.matmul(&self.nodes[b.idx].value)?;
        self.push(out, Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.idx].value.transpose()?;
        self.push(out, Op::Transpose(x), "transpose", &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.idx].value.reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape", &[x])
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.idx].value).collect();
        let out = Tensor::cat_last(&refs)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat", parts)
    }

    /// Channels `[start, start+len)` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.idx].value.slice_last(start, len)?;
        self.push(out, Op::Slice { x, start }, "slice", &[x])
    }

    /// Splits the last axis into consecutive chunks of the given widths.
    pub fn split(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = widths.iter().sum();
        let last = *self.shape(x).last().unwrap_or(&0);
        if total != last {
            return Err(NumError::InvalidArgument(format!(
                "split widths {widths:?} do not cover last axis of {:?}",
                self.shape(x)
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// L2-normalizes along the last axis. Rows with norm below `eps` map to zero.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.idx].value;
        let w = *v.shape().last().unwrap();
        let rows = v.numel() / w;
        let mut inv = vec![T::zero(); rows];
        let mut data = v.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * w..(r + 1) * w];
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            if n >= eps {
                inv[r] = T::one() / n;
            }
            for a in row.iter_mut() {
                *a *= inv[r];
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::L2Normalize { x, inv_norm: inv }, "l2_normalize", &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.idx].value;
        let w = *v.shape().last().unwrap();
        let rows = v.numel() / w;
        let wt = T::lit(w as f64);
        let mut rstd = vec![T::zero(); rows];
        let mut data = v.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * w..(r + 1) * w];
            let mu = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() / wt;
            rstd[r] = T::one() / (var + eps).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mu) * rstd[r];
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::LayerNorm { x, rstd }, "layer_norm", &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = &self.nodes[x.idx].value;
        let w = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(w) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for a in row.iter_mut() {
                *a = (*a - m).exp();
                z += *a;
            }
            for a in row.iter_mut() {
                *a /= z;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x), "softmax", &[x])
    }

    /// `out[i] = x[index[i]]`; `usize::MAX` entries read zero. Covers
    /// permutations (patchify), replication and zero-padded windows (im2col).
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.idx].value.gather(&index, shape)?;
        self.push(out, Op::Gather { x, index }, "gather", &[x])
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Full backward pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        self.check(out)?;
        let shape = self.nodes[out.idx].value.shape();
        if numel(shape) != 1 {
            return Err(NumError::NonScalarOutput(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.idx] = Some(Tensor::ones(shape));
        for i in (0..=out.idx).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    /// ∂out/∂input for each input, shaped like the input. Inputs that do not
    /// influence `out` get zeros.
    pub fn grad(&self, out: Var, inputs: &[Var]) -> Result<Vec<Tensor<T>>> {
        for &v in inputs {
            self.check(v)?;
            if !self.nodes[v.idx].requires_grad {
                return Err(NumError::InvalidArgument(format!("input node {} does not require grad", v.idx)));
            }
        }
        let g = self.backward(out)?;
        Ok(inputs
            .iter()
            .map(|&v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v))))
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.idx].requires_grad {
            return Ok(());
        }
        let target = self.nodes[v.idx].value.shape();
        let g = if g.shape() == target { g } else { g.reduce_to(target) };
        match &mut grads[v.idx] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.idx].value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (val(*a), val(*b));
                match kind {
                    BinaryKind::Add => {
                        self.accumulate(grads, *a, g.clone())?;
                        self.accumulate(grads, *b, g.clone())?;
                    }
                    BinaryKind::Sub => {
                        self.accumulate(grads, *a, g.clone())?;
                        self.accumulate(grads, *b, g.scale(-T::one()))?;
                    }
                    BinaryKind::Mul => {
                        if self.nodes[a.idx].requires_grad {
                            self.accumulate(grads, *a, g.mul(vb)?)?;
                        }
                        if self.nodes[b.idx].requires_grad {
                            self.accumulate(grads, *b, g.mul(va)?)?;
                        }
                    }
                    BinaryKind::Div => {
                        if self.nodes[a.idx].requires_grad {
                            self.accumulate(grads, *a, g.zip_with(vb, "div", |x, y| x / y)?)?;
                        }
                        if self.nodes[b.idx].requires_grad {
                            // -g · y / b where y = a / b
                            let gy = g.mul(y)?;
                            let gb = gy.zip_with(vb, "div", |x, d| -x / d)?;
                            self.accumulate(grads, *b, gb)?;
                        }
                    }
                }
            }
            Op::Unary(kind, x) => {
                let vx = val(*x);
                let d = match kind {
                    UnaryKind::Exp => g.mul(y)?,
                    UnaryKind::Log => g.zip_with(vx, "log'", |g, x| g / x)?,
                    UnaryKind::Sqrt => g.zip_with(y, "sqrt'", |g, s| g * T::lit(0.5) / s)?,
                    UnaryKind::Relu => g.zip_with(vx, "relu'", |g, x| if x > T::zero() { g } else { T::zero() })?,
                    UnaryKind::Silu => g.zip_with(vx, "silu'", |g, x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * (s + x * s * (T::one() - s))
                    })?,
                    UnaryKind::Tanh => g.zip_with(y, "tanh'", |g, t| g * (T::one() - t * t))?,
                };
                self.accumulate(grads, *x, d)?;
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone())?,
            Op::MulScalar(x, s) => self.accumulate(grads, *x, g.scale(*s))?,
            Op::Pow(x, p) => {
                let p = *p;
                let d = g.zip_with(val(*x), "pow'", |g, x| g * p * x.powf(p - T::one()))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let d = Tensor::full(val(*x).shape(), g.item());
                self.accumulate(grads, *x, d)?;
            }
            Op::Mean(x) => {
                let vx = val(*x);
                let d = Tensor::full(vx.shape(), g.item() / T::lit(vx.numel() as f64));
                self.accumulate(grads, *x, d)?;
            }
            Op::SumAxis(x) => {
                let d = Tensor::zeros(val(*x).shape()).add(g)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[a.idx].requires_grad {
                    let bt = vb.transpose()?;
                    self.accumulate(grads, *a, g.matmul(&bt)?)?;
                }
                if self.nodes[b.idx].requires_grad {
                    let gb = if vb.rank() == 2 && va.rank() > 2 {
                        let k = va.shape()[va.rank() - 1];
                        let n = vb.shape()[1];
                        let a2 = va.reshape(&[va.numel() / k, k])?;
                        let g2 = g.reshape(&[g.numel() / n, n])?;
                        a2.transpose()?.matmul(&g2)?
                    } else {
                        va.transpose()?.matmul(g)?
                    };
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?)?,
            Op::Reshape(x) => self.accumulate(grads, *x, g.reshape(val(*x).shape())?)?,
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = *val(*p).shape().last().unwrap();
                    if self.nodes[p.idx].requires_grad {
                        self.accumulate(grads, *p, g.slice_last(start, w)?)?;
                    }
                    start += w;
                }
            }
            Op::Slice { x, start } => {
                let vx = val(*x);
                let w_in = *vx.shape().last().unwrap();
                let w = *g.shape().last().unwrap();
                let mut d = Tensor::zeros(vx.shape());
                let dd = d.data_mut();
                for (r, row) in g.data().chunks(w).enumerate() {
                    dd[r * w_in + start..r * w_in + start + w].copy_from_slice(row);
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::L2Normalize { x, inv_norm } => {
                let w = *y.shape().last().unwrap();
                let mut d = g.clone();
                for (r, (drow, yrow)) in d.data_mut().chunks_mut(w).zip(y.data().chunks(w)).enumerate() {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = inv_norm[r] * (*dv - yv * dot);
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::LayerNorm { x, rstd } => {
                let w = *y.shape().last().unwrap();
                let wt = T::lit(w as f64);
                let mut d = g.clone();
                for (r, (drow, yrow)) in d.data_mut().chunks_mut(w).zip(y.data().chunks(w)).enumerate() {
                    let mg = drow.iter().copied().sum::<T>() / wt;
                    let mgy = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / wt;
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = rstd[r] * (*dv - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::Softmax(x) => {
                let w = *y.shape().last().unwrap();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::Gather { x, index } => {
                let mut d = Tensor::zeros(val(*x).shape());
                let dd = d.data_mut();
                for (k, &j) in index.iter().enumerate() {
                    if j != usize::MAX {
                        dd[j] += g.data()[k];
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
        }
        Ok(())
    }
}
