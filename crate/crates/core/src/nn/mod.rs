//! Numeric primitives: feature maps, dilated convolution, instance
//! normalization, weight-norm reparameterization, nearest-neighbor
//! resampling, and activations.
//!
//! Every differentiable primitive has a `*_fwd` kernel and a matching
//! `*_vjp` kernel (vector-Jacobian product) in the same file; the tape in
//! `train` composes them. The public functions validate shapes and wrap
//! the kernels for direct (inference) use.

mod activations;
mod conv;
mod norm;
mod resample;
mod weight_norm;

pub use activations::{leaky_relu, softmax_gated_tanh, tanh_map};
pub(crate) use activations::{
    gated_tanh_fwd, gated_tanh_vjp, leaky_relu_fwd, leaky_relu_vjp, tanh_fwd, tanh_vjp,
};
pub use conv::{conv1d, Conv1dSpec, ConvGeom};
pub(crate) use conv::{conv_backward_bias, conv_backward_input, conv_backward_weight, conv_forward};
pub use norm::instance_norm;
pub(crate) use norm::{instance_norm_fwd, instance_norm_vjp};
pub use resample::{resample_nearest, upsample_nearest};
pub(crate) use resample::{resample_fwd, resample_vjp};
pub use weight_norm::{apply_weight_norm, WeightNormParam};
pub(crate) use weight_norm::{weight_norm_fwd, weight_norm_vjp};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::tensor::Tensor;

/// Two-dimensional activation carrier in row-major `[channel][time]`
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    time: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, time: usize) -> Self {
        FeatureMap { channels, time, data: vec![T::zero(); channels * time] }
    }

    pub fn from_vec(channels: usize, time: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("feature map needs at least one channel"));
        }
        if data.len() != channels * time {
            return Err(Error::config(format!(
                "feature map data length {} does not equal {} channels x {} steps",
                data.len(),
                channels,
                time
            )));
        }
        Ok(FeatureMap { channels, time, data })
    }

    /// Build from per-channel rows (test convenience; rows must be equal
    /// length).
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("feature map needs at least one channel"));
        }
        let time = rows[0].len();
        if rows.iter().any(|r| r.len() != time) {
            return Err(Error::config("feature map rows differ in length"));
        }
        let mut data = Vec::with_capacity(rows.len() * time);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(FeatureMap { channels: rows.len(), time, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn time(&self) -> usize {
        self.time
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

    pub fn row(&self, c: usize) -> &[T] {
        &self.data[c * self.time..(c + 1) * self.time]
    }

    pub fn get(&self, c: usize, t: usize) -> T {
        self.data[c * self.time + t]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Tensor::from_vec(&[self.channels, self.time], self.data).expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.dims() {
            [c, n] => FeatureMap::from_vec(*c, *n, t.data().to_vec()),
            d => Err(Error::usage(format!("expected rank-2 tensor, found dims {:?}", d))),
        }
    }
}
