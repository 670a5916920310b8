//! Dense row-major tensors and the handful of kernels the model is built on.
//!
//! Everything is generic over [`Scalar`] so the same code runs in single
//! precision for training and inference and in double precision for
//! finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

/// Numeric precision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Real scalar type usable by every kernel.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from row slices of equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. All accumulate into `out` in a fixed order.

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `a[m×k] · b[k×n]` into a fresh buffer.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four independent partial sums let the compiler vectorize the loop.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of `x·σ(x)`.
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// In-place numerically stable softmax of one row; `-inf` entries get weight 0.
pub fn softmax_row<T: Scalar>(row: &mut [T]) -> Result<()> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(Error::DegenerateDistribution);
    }
    if !max.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() {
            T::zero()
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// In-place RMS normalization of one row. Returns `1/rms` for reuse in backward.
pub fn rmsnorm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let d = T::of(x.len() as f64);
    let ms = dot(x, x) / d;
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &xv), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xv * inv * g;
    }
    inv
}

/// Rotates consecutive pairs `(2i, 2i+1)` of every head in `row` by
/// `pos · base^(-2i/head_dim)`. `inverse` applies the transpose rotation.
pub fn rope_row<T: Scalar>(row: &mut [T], head_dim: usize, pos: usize, inverse: bool) {
    let half = head_dim / 2;
    for i in 0..half {
        let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
        let angle = pos as f64 * freq;
        let (s, c) = angle.sin_cos();
        let (s, c) = (T::of(if inverse { -s } else { s }), T::of(c));
        for head in row.chunks_exact_mut(head_dim) {
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor-level operations.

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::dim("matmul", "operands must be rank 2"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("{m}x{k} times {k2}x{n}"),
        ));
    }
    Tensor::new(vec![m, n], gemm(&a.data, &b.data, m, k, n))?.ensure_finite("matmul")
}

/// Softmax along `axis`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = logits.shape.len();
    if axis >= rank {
        return Err(Error::dim("softmax", format!("axis {axis} of rank {rank}")));
    }
    if logits.data.iter().any(|v| v.is_nan() || *v == T::infinity()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let n = logits.shape[axis];
    let inner: usize = logits.shape[axis + 1..].iter().product();
    let outer: usize = logits.shape[..axis].iter().product();
    let mut out = logits.clone();
    let mut lane = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = logits.data[base + j * inner];
            }
            softmax_row(&mut lane)?;
            for (j, l) in lane.iter().enumerate() {
                out.data[base + j * inner] = *l;
            }
        }
    }
    Ok(out)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "silu" });
    }
    let data = x.data.iter().map(|&v| silu_scalar(v)).collect();
    Tensor::new(x.shape.clone(), data)?.ensure_finite("silu")
}

/// RMS normalization over the last axis.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d {
        return Err(Error::dim(
            "rmsnorm",
            format!("gain of length {} for rows of length {d}", gain.len()),
        ));
    }
    let mut out = Tensor::zeros(&x.shape);
    for r in 0..x.rows() {
        rmsnorm_row(x.row(r), &gain.data, T::of(eps), out.row_mut(r));
    }
    out.ensure_finite("rmsnorm")
}

/// Rotary position embedding on a `[seq × heads × head_dim]` tensor.
pub fn rope_rotate<T: Scalar>(x: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
    if x.shape.len() != 3 {
        return Err(Error::dim("rope_rotate", "expected [seq, heads, head_dim]"));
    }
    let (seq, head_dim) = (x.shape[0], x.shape[2]);
    if head_dim % 2 != 0 {
        return Err(Error::Config(format!("head_dim {head_dim} must be even")));
    }
    if positions.len() != seq {
        return Err(Error::dim(
            "rope_rotate",
            format!("{} positions for {seq} rows", positions.len()),
        ));
    }
    let mut out = x.clone();
    let width = x.shape[1] * head_dim;
    for (s, &p) in positions.iter().enumerate() {
        rope_row(&mut out.data[s * width..(s + 1) * width], head_dim, p, false);
    }
    out.ensure_finite("rope_rotate")
}
