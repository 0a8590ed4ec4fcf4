//! Dense row-major tensors with copy-on-write storage.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Immutable dense tensor. Clones share storage; mutation only happens through
/// builder-style constructors, so values are safe to hand across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Like [`Tensor::new`] but panics on length mismatch; for internal op
    /// code where the length is correct by construction.
    pub(crate) fn raw(shape: &[usize], data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::ONE)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Self::raw(shape, vec![v; n])
    }

    pub fn scalar(v: S) -> Self {
        Self::raw(&[1], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Self::raw(shape, (0..n).map(|i| f(i)).collect())
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

    /// Single element of a `[1]` tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::raw(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        debug_assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::raw(&self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    /// In-place accumulate; reuses storage when uniquely owned.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let dst = Arc::make_mut(&mut self.data);
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.len(),
                shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::raw(
            &self.shape,
            self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        )
    }

    /// Dense 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2(self)?;
        let (k2, n) = dims2(other)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {} vs {}",
                k, k2
            )));
        }
        let mut out = vec![S::ZERO; m * n];
        unsafe {
            S::gemm(
                m,
                k,
                n,
                S::ONE,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                S::ZERO,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(Self::raw(&[m, n], out))
    }
}

pub(crate) fn dims2<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("expected rank-2 tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0f64; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0f64; 5]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn reshape_shares_storage() {
        let a = Tensor::new(&[2, 3], vec![1.0f32; 6]).unwrap();
        let b = a.reshaped(&[3, 2]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        assert!(a.reshaped(&[4, 2]).is_err());
    }
}
