use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::ledger;
use crate::error::{FtmError, Result};

/// Element type tag used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Scalar element of a tensor. Implemented for `f32` (default) and `f64`
/// (verification mode).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Shorthand for converting an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Ledger-tracked flat buffer.
struct Buffer<T: Real>(Vec<T>);

impl<T: Real> Buffer<T> {
    fn new(v: Vec<T>) -> Self {
        ledger::record_alloc(v.len() * std::mem::size_of::<T>());
        Buffer(v)
    }
}

impl<T: Real> Drop for Buffer<T> {
    fn drop(&mut self) {
        ledger::record_free(self.0.len() * std::mem::size_of::<T>());
    }
}

impl<T: Real> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer::new(self.0.clone())
    }
}

/// Dense row-major tensor. Rank 1 and rank 2 are what the models use.
#[derive(Clone)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Buffer<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data.0)
            .finish()
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.0 == other.data.0
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(FtmError::Empty(format!(
                "tensor shape {shape:?} must have positive extents"
            )));
        }
        if n != data.len() {
            return Err(FtmError::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Buffer::new(data),
        })
    }

    /// Internal constructor for kernels that have already validated shape.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Buffer::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::raw(vec![1], vec![v])
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(FtmError::Data("ragged rows".into()));
        }
        Tensor::from_vec(&[r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.0.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data.0
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data.0
    }

    /// Number of rows of a rank-2 tensor (1 for rank 1).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data.0[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data.0[i * self.cols() + j]
    }

    pub fn item(&self) -> T {
        self.data.0[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(FtmError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::raw(self.shape.clone(), self.data.0.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor::raw(
            self.shape.clone(),
            self.data
                .0
                .iter()
                .zip(&other.data.0)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.0.iter_mut().zip(&other.data.0) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: T) {
        for a in self.data.0.iter_mut() {
            *a *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.0.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.0.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .0
            .iter()
            .zip(&other.data.0)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.0.iter().all(|x| x.is_finite())
    }

    /// Rows `start..end` of a rank-2 tensor, copied.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Tensor::raw(vec![end - start, c], self.data.0[start * c..end * c].to_vec())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data.0.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect(),
        )
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.0.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_validation() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]),
            Err(FtmError::Shape { .. })
        ));
        assert!(Tensor::<f32>::from_vec(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn clone_is_accounted() {
        let before = ledger::live_bytes();
        let a = Tensor::<f64>::zeros(&[10]);
        let b = a.clone();
        assert_eq!(ledger::live_bytes(), before + 160);
        drop((a, b));
        assert_eq!(ledger::live_bytes(), before);
    }
}
