//! Dense row-major tensors over `f32` or `f64`.
//!
//! Training runs on `f32` storage; gradient-check tests instantiate the same
//! code paths with `f64`. Reductions accumulate in `f64` regardless of the
//! storage type.

use crate::{Result, SgnError};

/// Scalar storage type for tensors. All arithmetic in the ops goes through
/// `f64`; this trait only provides the conversions and a couple of constants.
pub trait Real: Copy + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_val(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

/// Dense N-dimensional array, contiguous row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; len],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(SgnError::Shape(format!(
                "tensor data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                expected
            )));
        }
        debug_assert!(
            data.iter().all(|v| v.is_finite_val()),
            "tensor constructed with non-finite values"
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    /// Row-major offset of a 2-d index.
    #[inline(always)]
    pub fn i2(&self, a: usize, b: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        a * self.shape[1] + b
    }

    /// Row-major offset of a 3-d index.
    #[inline(always)]
    pub fn i3(&self, a: usize, b: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (a * self.shape[1] + b) * self.shape[2] + c
    }

    /// Row-major offset of a 4-d index.
    #[inline(always)]
    pub fn i4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    pub fn at(&self, offset: usize) -> F {
        self.data[offset]
    }

    /// Convert the storage type, rounding through `f64`.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let r = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]);
        assert!(matches!(r, Err(SgnError::Shape(_))));
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(t.i3(1, 2, 3), 23);
        let t4 = Tensor::<f32>::zeros(&[2, 3, 4, 5]);
        assert_eq!(t4.i4(1, 2, 3, 4), ((3 + 2) * 4 + 3) * 5 + 4);
    }

    #[test]
    fn cast_round_trips_f32() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.5, -2.25, 0.125]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
