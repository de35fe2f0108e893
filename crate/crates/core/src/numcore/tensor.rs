use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NumError, Result, Scalar};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Whether a graph leaf built from this tensor should be differentiated.
    pub requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes. Extents must be equal or 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// For every flat index of `out_shape`, the flat index it reads in a tensor
/// of `in_shape` broadcast up to `out_shape`.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    // stride per output axis, zero where the input is broadcast
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < offset || in_shape[i - offset] == 1 {
                0
            } else {
                in_strides[i - offset]
            }
        })
        .collect();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NumError::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(NumError::InvalidArgument(format!(
                "shape {shape:?} holds {} elements but data has {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)], requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[1], v)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect(), requires_grad: false }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(NumError::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), requires_grad: false }
    }

    /// Elementwise binary op under right-aligned broadcasting.
    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self { shape: self.shape.clone(), data, requires_grad: false });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| NumError::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        })?;
        let data = if other.numel() == 1 && out_shape == self.shape {
            let b = other.data[0];
            self.data.iter().map(|&a| f(a, b)).collect()
        } else {
            let ma = broadcast_index_map(&self.shape, &out_shape);
            let mb = broadcast_index_map(&other.shape, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(self.data[i], other.data[j])).collect()
        };
        Ok(Self { shape: out_shape, data, requires_grad: false })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Sums a broadcast gradient back down to `shape`.
    pub fn reduce_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let mut out = Self::zeros(shape);
        if numel(shape) == 1 {
            out.data[0] = self.data.iter().copied().sum();
            return out;
        }
        let map = broadcast_index_map(shape, &self.shape);
        for (k, &j) in map.iter().enumerate() {
            out.data[j] += self.data[k];
        }
        out
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Matrix product. `self` is `[.., m, k]`; `other` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with identical batch extents.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let mismatch = || NumError::ShapeMismatch { op: "matmul", left: self.shape.clone(), right: other.shape.clone() };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (k2, n) = (other.shape[other.rank() - 2], other.shape[other.rank() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_shape = &self.shape[..self.rank() - 2];
        let batch = numel(batch_shape);
        let shared_rhs = other.rank() == 2;
        if !shared_rhs && other.shape[..other.rank() - 2] != *batch_shape {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a = &self.data[bi * m * k..(bi + 1) * m * k];
            let b = if shared_rhs { &other.data[..] } else { &other.data[bi * k * n..(bi + 1) * k * n] };
            let c = &mut out[bi * m * n..(bi + 1) * m * n];
            gemm(a, b, c, m, k, n);
        }
        let mut shape = batch_shape.to_vec();
        shape.push(m);
        shape.push(n);
        Ok(Self { shape, data: out, requires_grad: false })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(NumError::InvalidArgument(format!("transpose needs rank >= 2, got {:?}", self.shape)));
        }
        let r = self.rank();
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.numel() / (m * n);
        let mut out = vec![T::zero(); self.numel()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Self { shape, data: out, requires_grad: false })
    }

    /// Gathers `out[i] = self[index[i]]`, with `usize::MAX` reading zero.
    pub fn gather(&self, index: &[usize], shape: &[usize]) -> Result<Self> {
        if numel(shape) != index.len() {
            return Err(NumError::InvalidArgument(format!(
                "gather index has {} entries for output shape {shape:?}",
                index.len()
            )));
        }
        let data = index
            .iter()
            .map(|&i| if i == usize::MAX { Ok(T::zero()) } else { self.data.get(i).copied().ok_or(()) })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| NumError::InvalidArgument("gather index out of range".into()))?;
        Self::new(shape.to_vec(), data)
    }

    /// Rows `[start, start+len)` along the first axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let row = self.numel() / self.shape[0];
        if start + len > self.shape[0] || len == 0 {
            return Err(NumError::InvalidArgument(format!(
                "row slice {start}..{} out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(shape, self.data[start * row..(start + len) * row].to_vec())
    }

    /// Concatenates along the first axis.
    pub fn cat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| NumError::InvalidArgument("cat of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(NumError::ShapeMismatch { op: "cat_rows", left: first.shape.clone(), right: p.shape.clone() });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Self::new(shape, data)
    }

    /// Concatenates along the last axis.
    pub fn cat_last(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| NumError::InvalidArgument("concat of nothing".into()))?;
        let lead = &first.shape[..first.rank() - 1];
        let rows = numel(lead);
        let mut width = 0;
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(NumError::ShapeMismatch { op: "concat", left: first.shape.clone(), right: p.shape.clone() });
            }
            width += p.shape[p.rank() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let w = p.shape[p.rank() - 1];
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Self::new(shape, data)
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Self> {
        let w = self.shape[self.rank() - 1];
        if len == 0 || start + len > w {
            return Err(NumError::InvalidArgument(format!(
                "slice {start}..{} out of range for last axis of {:?}",
                start + len,
                self.shape
            )));
        }
        let rows = self.numel() / w;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * w + start..r * w + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Self::new(shape, data)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn reduce_inverts_broadcast() {
        let g = Tensor::<f64>::ones(&[4, 2, 3]);
        let r = g.reduce_to(&[2, 1]);
        assert_eq!(r.data(), &[12.0, 12.0]);
    }

    #[test]
    fn batched_matmul_shared_rhs() {
        let a = Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn concat_and_slice_last() {
        let a = Tensor::<f32>::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_f64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::cat_last(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice_last(1, 2).unwrap(), b);
    }
}
