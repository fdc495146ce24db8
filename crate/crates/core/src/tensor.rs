//! Dense row-major tensor used for parameters, gradients, and tape values.

use crate::error::{Error, Result};
use crate::num::Real;

/// Row-major dense tensor. Rank 0 (empty `dims`) is a scalar with one
/// element; rank 1 a vector; rank 3 a convolution weight `[out, in, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![T::zero(); numel_of(dims)] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if data.len() != numel_of(dims) {
            return Err(Error::config(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { dims: vec![], data: vec![v] }
    }

    pub fn filled(dims: &[usize], v: T) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![v; numel_of(dims)] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn is_scalar(&self) -> bool {
        self.dims.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if !self.is_scalar() {
            return Err(Error::usage(format!(
                "expected scalar tensor, found dims {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise accumulate `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims, "tensor add: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Elementwise scale `self *= s`.
    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }
}

impl<T> Default for Tensor<T> {
    fn default() -> Self {
        Tensor { dims: vec![0], data: vec![] }
    }
}

fn numel_of(dims: &[usize]) -> usize {
    if dims.is_empty() {
        1
    } else {
        dims.iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_tensor_has_one_element() {
        let t = Tensor::scalar(3.5f32);
        assert!(t.is_scalar());
        assert_eq!(t.numel(), 1);
        assert_eq!(t.scalar_value().unwrap(), 3.5);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0f32; 6]).is_ok());
    }

    #[test]
    fn add_assign_accumulates() {
        let mut a = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.5f64, 0.5, 0.5]).unwrap();
        a.add_assign(&b);
        assert_eq!(a.data(), &[1.5, 2.5, 3.5]);
    }
}
