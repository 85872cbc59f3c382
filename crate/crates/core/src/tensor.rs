//! Dense row-major tensors and the numeric kernels the layers are built from.
//!
//! There are no strides and no implicit broadcasting. Binary ops require equal
//! shapes; the only broadcasts are the explicit rank-1 bias adds
//! ([`Tensor::add_row_bias`] over rows, [`Tensor::add_col_bias`] over columns).
//!
//! Every reduction runs in a fixed left-to-right order so results are
//! bit-reproducible across runs.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{invalid, Error, Result};

/// Element type tag, also used as the on-disk dtype byte of checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    const DTYPE: DType;
    const SIZE: usize;

    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const SIZE: usize = 4;

    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const SIZE: usize = 8;

    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(invalid(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_dtype<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(mismatch(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Sum of all elements, left to right.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// `A[m×k] · B[k×p]`. Each output element accumulates over `k` in
    /// ascending order starting from zero.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self
            .dims2("matmul")
            .map_err(|_| mismatch("matmul", &self.shape, &other.shape))?;
        let (k2, p) = other
            .dims2("matmul")
            .map_err(|_| mismatch("matmul", &self.shape, &other.shape))?;
        if k != k2 {
            return Err(mismatch("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * p..(kk + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, p],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// `X[n×c] + bias[c]`, bias repeated on every row.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        let (n, c) = self
            .dims2("add_row_bias")
            .map_err(|_| mismatch("add_row_bias", &self.shape, &bias.shape))?;
        if bias.shape != [c] {
            return Err(mismatch("add_row_bias", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..c {
                out.data[i * c + j] = out.data[i * c + j] + bias.data[j];
            }
        }
        Ok(out)
    }

    /// `X[n×c] + bias[n]`, bias entry `i` added to every column of row `i`.
    pub fn add_col_bias(&self, bias: &Self) -> Result<Self> {
        let (n, c) = self
            .dims2("add_col_bias")
            .map_err(|_| mismatch("add_col_bias", &self.shape, &bias.shape))?;
        if bias.shape != [n] {
            return Err(mismatch("add_col_bias", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..c {
                out.data[i * c + j] = out.data[i * c + j] + bias.data[i];
            }
        }
        Ok(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (m, k) = self.dims2("softmax_rows")?;
        if k == 0 {
            return Err(invalid("softmax_rows", "rows must be non-empty"));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut out = vec![T::zero(); m * k];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let o = &mut out[i * k..(i + 1) * k];
            let mut total = T::zero();
            for (dst, &x) in o.iter_mut().zip(row) {
                *dst = (x - max).exp();
                total = total + *dst;
            }
            for v in o.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let (n, c) = self.dims2("slice_cols")?;
        if start + width > c {
            return Err(invalid(
                "slice_cols",
                format!("columns {start}..{} out of range for width {c}", start + width),
            ));
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Ok(Self {
            shape: vec![n, width],
            data,
        })
    }

    /// Splits the last axis into `parts` equal pieces.
    pub fn split_last_axis(&self, parts: usize) -> Result<Vec<Self>> {
        let (_, c) = self.dims2("split_last_axis")?;
        if parts == 0 || c % parts != 0 {
            return Err(invalid(
                "split_last_axis",
                format!("last extent {c} is not divisible into {parts} parts"),
            ));
        }
        let w = c / parts;
        (0..parts).map(|p| self.slice_cols(p * w, w)).collect()
    }

    pub fn concat_last_axis(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_last_axis", "no inputs"))?;
        let (n, _) = first.dims2("concat_last_axis")?;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2("concat_last_axis")?;
            if r != n {
                return Err(mismatch("concat_last_axis", &first.shape, &p.shape));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self {
            shape: vec![n, total],
            data,
        })
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(invalid(
                    "gather_rows",
                    format!("row {i} out of range for {r} rows"),
                ));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Self {
            shape: vec![idx.len(), c],
            data,
        })
    }

    pub fn mean_rows(&self) -> Result<Self> {
        let (n, c) = self.dims2("mean_rows")?;
        if n == 0 {
            return Err(invalid("mean_rows", "no rows"));
        }
        let mut out = vec![T::zero(); c];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        Ok(Self {
            shape: vec![1, c],
            data: out.into_iter().map(|v| v * inv).collect(),
        })
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `x · Φ(x)` with the exact Gaussian CDF.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

/// d/dx of [`gelu_scalar`]: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = T::from_f64_lossy(FRAC_1_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Variance epsilon used by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Forward pass of layer normalization over the last axis (population
/// variance). Returns the output together with the normalized input and the
/// per-row inverse standard deviation, which the adjoint needs.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (n, c) = x.dims2("layer_norm")?;
    if c == 0 {
        return Err(invalid("layer_norm", "channel extent must be >= 1"));
    }
    if gamma.shape() != [c] {
        return Err(mismatch("layer_norm", x.shape(), gamma.shape()));
    }
    if beta.shape() != [c] {
        return Err(mismatch("layer_norm", x.shape(), beta.shape()));
    }
    let cf = T::from_usize(c).unwrap();
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let mut xhat = vec![T::zero(); n * c];
    let mut out = vec![T::zero(); n * c];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) / cf;
        let var = row
            .iter()
            .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
            / cf;
        let r = T::one() / (var + eps).sqrt();
        inv_std.push(r);
        for j in 0..c {
            let h = (row[j] - mean) * r;
            xhat[i * c + j] = h;
            out[i * c + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::new(vec![n, c], out)?,
        Tensor::new(vec![n, c], xhat)?,
        inv_std,
    ))
}

/// Builds the `n×n` Toeplitz matrix `W[i][j] = w[j - i + n - 1]` from its
/// `2n-1` diagonal values (lowest diagonal first).
pub fn toeplitz_materialize<T: Scalar>(w: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if n == 0 || w.shape() != [2 * n - 1] {
        return Err(invalid(
            "toeplitz_materialize",
            format!(
                "expected a vector of length {} for n={n}, got shape {:?}",
                (2 * n).saturating_sub(1),
                w.shape()
            ),
        ));
    }
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(w.data()[j + n - 1 - i]);
        }
    }
    Tensor::new(vec![n, n], data)
}
