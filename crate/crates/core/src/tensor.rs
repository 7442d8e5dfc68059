//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a contiguous buffer and a shape. Elementwise binary ops
//! broadcast only across size-1 axes of equal-rank operands (a rank-0 tensor
//! broadcasts against anything). Every reduction walks its input in
//! ascending flat-index order, so each output slot sums its elements in the
//! same sequence on every run.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::config(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// `C <- alpha * A B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[inline]
pub(crate) fn cast<S: Scalar>(v: f64) -> S {
    S::from_f64_lossy(v)
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", S::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        f.write_str("]")
    }
}

/// Result of a masked two-pass moment reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMoments<S: Scalar = f64> {
    pub mean: Tensor<S>,
    pub biased_variance: Tensor<S>,
    pub count: Tensor<S>,
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "shape {shape:?} has a zero extent on axis {axis}"
        )));
    }
    Ok(shape.iter().product())
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Calls `visit(out_offset)` for every element of `shape` in row-major
/// order, where the output offset advances by `out_strides[axis]` per step
/// along `axis`.
fn for_each_mapped(shape: &[usize], out_strides: &[usize], mut visit: impl FnMut(usize)) {
    let rank = shape.len();
    let total: usize = shape.iter().product();
    if rank == 0 {
        visit(0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        visit(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += out_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= out_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n = check_extents(&shape)?;
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} elements, buffer holds {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = check_extents(shape).expect("tensor extents must be positive");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, rounding to `S`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| cast(v)).collect())
    }

    /// A rank-1 tensor over `values`.
    pub fn vector(values: &[S]) -> Self {
        Self::new(vec![values.len()], values.to_vec()).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(format!(
                "item() on a tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn get(&self, index: &[usize]) -> Result<S> {
        if index.len() != self.rank() || index.iter().zip(&self.shape).any(|(&i, &d)| i >= d) {
            return Err(Error::invalid(format!(
                "index {index:?} out of bounds for shape {:?}",
                self.shape
            )));
        }
        let strides = row_major_strides(&self.shape);
        Ok(self.data[index.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>()])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn sum_all(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean_all(&self) -> S {
        self.sum_all() / cast(self.data.len() as f64)
    }

    pub fn sqrt(&self) -> Self {
        self.map(|v| v.sqrt())
    }

    pub fn square(&self) -> Self {
        self.map(|v| v * v)
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|v| v * factor)
    }

    /// 1 where `|t| <= threshold`, else 0.
    pub fn compare_abs_le(&self, threshold: S) -> Self {
        self.map(|v| if v.abs() <= threshold { S::one() } else { S::zero() })
    }

    fn broadcast_shape(&self, other: &Self) -> Result<Vec<usize>> {
        if self.rank() == 0 {
            return Ok(other.shape.clone());
        }
        if other.rank() == 0 {
            return Ok(self.shape.clone());
        }
        let mismatch = || Error::ShapeMismatch {
            expected: self.shape.clone(),
            actual: other.shape.clone(),
        };
        if self.rank() != other.rank() {
            return Err(mismatch());
        }
        self.shape
            .iter()
            .zip(&other.shape)
            .map(|(&a, &b)| match (a, b) {
                _ if a == b => Ok(a),
                (1, _) => Ok(b),
                (_, 1) => Ok(a),
                _ => Err(mismatch()),
            })
            .collect()
    }

    fn broadcast_strides(&self, out_shape: &[usize]) -> Vec<usize> {
        if self.rank() == 0 {
            return vec![0; out_shape.len()];
        }
        let strides = row_major_strides(&self.shape);
        self.shape
            .iter()
            .zip(strides)
            .map(|(&d, s)| if d == 1 { 0 } else { s })
            .collect()
    }

    /// Elementwise `f(a, b)` with size-1 broadcasting.
    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape == other.shape {
            return Ok(Self {
                shape: self.shape.clone(),
                data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            });
        }
        let out_shape = self.broadcast_shape(other)?;
        let sa = self.broadcast_strides(&out_shape);
        let sb = other.broadcast_strides(&out_shape);
        let n: usize = out_shape.iter().product();
        // Offsets of `b` are gathered first; `for_each_mapped` drives one
        // stride set at a time.
        let mut b_off = Vec::with_capacity(n);
        for_each_mapped(&out_shape, &sb, |o| b_off.push(o));
        let mut data = Vec::with_capacity(n);
        let mut i = 0;
        for_each_mapped(&out_shape, &sa, |o| {
            data.push(f(self.data[o], other.data[b_off[i]]));
            i += 1;
        });
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    /// Division by zero yields non-finite values; callers guard with epsilon.
    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a / b)
    }

    fn reduction_plan(&self, axes: &[usize], keepdims: bool) -> Result<(Vec<usize>, Vec<usize>)> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::invalid(format!(
                    "axis {ax} out of range for rank {rank}"
                )));
            }
            if reduced[ax] {
                return Err(Error::invalid(format!("axis {ax} listed twice")));
            }
            reduced[ax] = true;
        }
        let kept: Vec<usize> = (0..rank)
            .map(|ax| if reduced[ax] { 1 } else { self.shape[ax] })
            .collect();
        let kept_strides = row_major_strides(&kept);
        let out_strides = (0..rank)
            .map(|ax| if reduced[ax] { 0 } else { kept_strides[ax] })
            .collect();
        let out_shape = if keepdims {
            kept
        } else {
            (0..rank)
                .filter(|&ax| !reduced[ax])
                .map(|ax| self.shape[ax])
                .collect()
        };
        Ok((out_shape, out_strides))
    }

    pub fn reduce_sum(&self, axes: &[usize], keepdims: bool) -> Result<Self> {
        let (out_shape, out_strides) = self.reduction_plan(axes, keepdims)?;
        let mut out = vec![S::zero(); out_shape.iter().product()];
        let mut i = 0;
        for_each_mapped(&self.shape, &out_strides, |o| {
            out[o] += self.data[i];
            i += 1;
        });
        Tensor::new(out_shape, out)
    }

    /// Arithmetic mean over `axes`; reduced axes are dropped unless `keepdims`.
    pub fn reduce_mean(&self, axes: &[usize], keepdims: bool) -> Result<Self> {
        let sum = self.reduce_sum(axes, keepdims)?;
        let count: usize = axes.iter().map(|&ax| self.shape[ax]).product();
        let count: S = cast(count as f64);
        Ok(sum.map(|s| s / count))
    }

    /// Mean, biased variance and count of the elements selected by a {0,1}
    /// mask, per reduction slice.
    ///
    /// The first pass accumulates `sum(f * x)` and `sum(f)`; the second
    /// accumulates `sum(f * (x - mean)^2)`. A slice with no selected element
    /// yields [`Error::DegenerateMask`].
    pub fn reduce_masked_moments(
        &self,
        mask: &Self,
        axes: &[usize],
        keepdims: bool,
    ) -> Result<MaskedMoments<S>> {
        if mask.shape != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: mask.shape.clone(),
            });
        }
        let (out_shape, out_strides) = self.reduction_plan(axes, keepdims)?;
        let slots: usize = out_shape.iter().product();
        let mut sum = vec![S::zero(); slots];
        let mut count = vec![S::zero(); slots];
        let mut i = 0;
        for_each_mapped(&self.shape, &out_strides, |o| {
            let f = mask.data[i];
            sum[o] += f * self.data[i];
            count[o] += f;
            i += 1;
        });
        if let Some(slice) = count.iter().position(|c| *c == S::zero()) {
            return Err(Error::DegenerateMask { slice });
        }
        let mean: Vec<S> = sum.iter().zip(&count).map(|(&s, &c)| s / c).collect();
        let mut sq = vec![S::zero(); slots];
        let mut i = 0;
        for_each_mapped(&self.shape, &out_strides, |o| {
            let d = self.data[i] - mean[o];
            sq[o] += mask.data[i] * d * d;
            i += 1;
        });
        let var = sq.iter().zip(&count).map(|(&s, &c)| s / c).collect();
        Ok(MaskedMoments {
            mean: Tensor::new(out_shape.clone(), mean)?,
            biased_variance: Tensor::new(out_shape.clone(), var)?,
            count: Tensor::new(out_shape, count)?,
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                expected: vec![self.shape.get(1).copied().unwrap_or(0), 0],
                actual: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Self::zeros(&[m, n]);
        gemm_into(
            Mat::row_major(&self.data, m, k),
            Mat::row_major(&other.data, k, n),
            &mut out.data,
            S::zero(),
        );
        Ok(out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::invalid("transpose2 needs a rank-2 tensor"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Tensor::new(vec![c, r], data)
    }
}

/// A borrowed strided matrix view used by [`gemm_into`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a, S> Mat<'a, S> {
    pub fn row_major(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out <- a * b + beta * out`, with `out` row-major `a.rows x b.cols`.
pub(crate) fn gemm_into<S: Scalar>(a: Mat<'_, S>, b: Mat<'_, S>, out: &mut [S], beta: S) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    let span = |m: &Mat<'_, S>| {
        if m.rows == 0 || m.cols == 0 {
            0
        } else {
            (m.rows as isize - 1) * m.row_stride + (m.cols as isize - 1) * m.col_stride + 1
        }
    };
    assert!(span(&a) as usize <= a.data.len() && span(&b) as usize <= b.data.len());
    // SAFETY: extents checked above; `out` is a distinct mutable borrow.
    unsafe {
        S::gemm(
            a.rows,
            a.cols,
            b.cols,
            S::one(),
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}
