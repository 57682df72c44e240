//! Dense row-major tensors, the universal value type of the engine.
//!
//! Rank is at most 4 with the `[N, C, H, W]` convention for image batches.
//! Compute defaults to `f32`; the `f64` instantiation exists for gradient
//! checking, where central differences need the extra mantissa bits.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Element-type tag used by the on-disk tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    U32 = 3,
}

/// Real scalar usable as a tensor element.
pub trait Scalar:
    Copy
    + fmt::Debug
    + fmt::Display
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $dtype;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            fn maximum(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn minimum(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32);
impl_scalar!(f64, Dtype::F64);

pub const MAX_RANK: usize = 4;

/// Dense row-major tensor. Immutable once produced by an engine op.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from raw data; `dims` may be empty for a rank-0 scalar.
    pub fn from_vec(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidTensor(format!(
                "rank {} exceeds maximum {MAX_RANK}",
                dims.len()
            )));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {:?} imply {} elements but data has {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![S::ZERO; numel],
        }
    }

    pub fn full(dims: &[usize], value: S) -> Self {
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            dims: vec![],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    /// Same data, new dims. Element count must match.
    pub fn reshaped(&self, dims: Vec<usize>) -> Result<Self> {
        Self::from_vec(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// NaN/Inf anywhere is an error state; callers name the op that produced it.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.dims[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Copies the `n`-th leading-axis slice (e.g. one image of a batch).
    pub fn index_axis0(&self, n: usize) -> Tensor<S> {
        let inner: usize = self.dims[1..].iter().product();
        let dims = self.dims[1..].to_vec();
        let data = self.data[n * inner..(n + 1) * inner].to_vec();
        Tensor { dims, data }
    }

    /// Gathers leading-axis slices into a new tensor (batch assembly).
    pub fn gather_axis0(&self, indices: &[usize]) -> Tensor<S> {
        let inner: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        Tensor { dims, data }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("stack of zero tensors".into()))?;
        let mut dims = Vec::with_capacity(first.rank() + 1);
        dims.push(parts.len());
        dims.extend_from_slice(first.dims());
        let mut data = Vec::with_capacity(parts.len() * first.numel());
        for p in parts {
            if p.dims() != first.dims() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.dims().to_vec(),
                    rhs: p.dims().to_vec(),
                });
            }
            data.extend_from_slice(p.data());
        }
        Tensor::from_vec(dims, data)
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}

/// Flat index into an `[N, C, H, W]` tensor.
#[inline]
pub fn idx4(dims: &[usize], n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * dims[1] + c) * dims[2] + h) * dims[3] + w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rank_limit_enforced() {
        let r5 = Tensor::<f32>::from_vec(vec![1, 1, 1, 1, 1], vec![0.0]);
        assert!(r5.is_err());
    }

    #[test]
    fn rank0_scalar() {
        let t = Tensor::<f64>::scalar(2.5);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 2.5);
    }

    #[test]
    fn finite_check_flags_nan() {
        let t = Tensor::<f32>::from_vec(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(
            t.check_finite("unit"),
            Err(Error::NonFinite { op: "unit" })
        ));
    }

    #[test]
    fn gather_axis0_picks_rows() {
        let t = Tensor::<f32>::from_vec(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let g = t.gather_axis0(&[2, 0]);
        assert_eq!(g.dims(), &[2, 2]);
        assert_eq!(g.data(), &[4., 5., 0., 1.]);
    }
}
