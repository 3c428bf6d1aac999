use std::fmt;

use num_traits::Float;

use super::TensorError;

/// Floating-point element type accepted by [`Tensor`].
///
/// Implemented for `f32` and `f64`; the precision is fixed when a tensor is
/// constructed and recorded in the binary format.
pub trait Scalar:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    /// Width of the IEEE-754 representation in bits (32 or 64).
    const BITS: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one scalar from a slice of exactly `BITS / 8` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BITS: u8 = 32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte scalar"))
    }
}

impl Scalar for f64 {
    const BITS: u8 = 64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte scalar"))
    }
}

/// Dense row-major array of rank 1 to 3.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("bytes_per_scalar", &std::mem::size_of::<T>())
            .finish_non_exhaustive()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be 1, 2 or 3",
        });
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive",
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: "data length does not match the product of extents",
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self, TensorError> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    /// Builds a tensor by evaluating `f` on each flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self, TensorError> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        })
    }

    pub fn identity(n: usize) -> Result<Self, TensorError> {
        Self::from_fn(&[n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows",
            });
        }
        Self::new(&[rows.len(), cols], rows.concat())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows of a rank-2 tensor; for other ranks, the leading extent.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor (innermost extent otherwise).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub(crate) fn expect_rank2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        let (r, c) = self.expect_rank2("transpose")?;
        Self::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
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

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Columns `[start, end)` of a rank-2 tensor as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        let (r, c) = self.expect_rank2("slice_cols")?;
        if start >= end || end > c {
            return Err(TensorError::Contract(format!(
                "column range {start}..{end} invalid for {r}x{c}"
            )));
        }
        let w = end - start;
        Self::from_fn(&[r, w], |i| self.data[(i / w) * c + start + i % w])
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_cols(&mut self, start: usize, block: &Self) -> Result<(), TensorError> {
        let (r, c) = self.expect_rank2("set_cols")?;
        let (br, bc) = block.expect_rank2("set_cols")?;
        if br != r || start + bc > c {
            return Err(TensorError::ShapeMismatch {
                op: "set_cols",
                lhs: self.shape.clone(),
                rhs: block.shape.clone(),
            });
        }
        for i in 0..r {
            self.data[i * c + start..i * c + start + bc].copy_from_slice(block.row(i));
        }
        Ok(())
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(parts: &[Self]) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let (r, _) = first.expect_rank2("concat_cols")?;
        let total: usize = parts.iter().map(Tensor::cols).sum();
        let mut out = Self::zeros(&[r, total])?;
        let mut at = 0;
        for p in parts {
            out.set_cols(at, p)?;
            at += p.cols();
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Euclidean norm of the flattened data, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| x.to_f64() * x.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − other‖ / max(‖self‖, ‖other‖)`, or the absolute difference
    /// norm when both are zero.
    pub fn rel_err(&self, other: &Self) -> Result<f64, TensorError> {
        let diff = self.sub(other)?.norm();
        let scale = self.norm().max(other.norm());
        Ok(if scale == 0.0 { diff } else { diff / scale })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, TensorError> {
        Ok(self.sub(other)?.max_abs().to_f64())
    }
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of `f64` values converted to `T`.
    pub fn from_f64s(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }
}

/// Spatial feature map of shape `H × W × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f64>(Tensor<T>);

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self, TensorError> {
        if tensor.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "feature_map",
                expected: 3,
                shape: tensor.shape().to_vec(),
            });
        }
        Ok(Self(tensor))
    }

    /// Reinterprets an `(H·W) × C` token matrix as a feature map.
    pub fn from_tokens(tokens: Tensor<T>, height: usize, width: usize) -> Result<Self, TensorError> {
        let c = tokens.cols();
        Self::new(tokens.reshape(&[height, width, c])?)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Row-major flattening to `(H·W) × C`.
    pub fn tokens(&self) -> Tensor<T> {
        Tensor {
            shape: vec![self.height() * self.width(), self.channels()],
            data: self.0.data.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap(self.0.cast())
    }
}
