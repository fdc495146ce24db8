//! Execution backends for the model graphs.
//!
//! Every network forward (generator, discriminators, losses) is written
//! once against the [`Backend`] trait. [`Eager`] executes immediately on
//! tensors; the recording tape in the training module implements the
//! same trait with node ids as values. Both route through the shared
//! `vo_*` value operations in this file, so an eager run and a taped
//! run of the same graph produce bitwise identical forward results.
//!
//! Value shape conventions: activations are rank-2 `[channels, time]`
//! tensors, waveforms are `[1, samples]`, and reduced losses are
//! rank-0 scalars.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{stft_forward_parts, StftPlan};
use crate::losses::{logmag_fwd, sc_fwd};
use crate::nn::{
    conv_forward, gated_tanh_fwd, instance_norm_fwd, leaky_relu_fwd, resample_fwd, tanh_fwd,
    weight_norm_fwd, Conv1dSpec, ConvGeom,
};
use crate::num::Real;
use crate::pqmf::{pqmf_analysis, PqmfBank};
use crate::tensor::Tensor;

/// Standard deviation of the direction initialization.
pub const INIT_WEIGHT_STD: f64 = 0.02;

/// Executes graph operations over an associated value representation.
///
/// `param` introduces a named, differentiable leaf; `constant`
/// introduces data that never receives a gradient (inputs, the frozen
/// player's weights, precomputed reference spectra).
pub trait Backend<T: Real> {
    type Value: Clone;

    fn param(&mut self, name: &str, value: Tensor<T>) -> Self::Value;
    fn constant(&mut self, value: Tensor<T>) -> Self::Value;
    /// Scalar readback for logging; fails on non-scalar values.
    fn read_scalar(&self, v: &Self::Value) -> Result<T>;

    /// Weight-normalized weight `w = g · v / ‖v‖_row` where rows are the
    /// leading axis of `v` and `g` holds one magnitude per row.
    fn weight_norm(&mut self, v: &Self::Value, g: &Self::Value) -> Result<Self::Value>;
    fn conv1d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        bias: Option<&Self::Value>,
        geom: &ConvGeom,
    ) -> Result<Self::Value>;
    fn instance_norm(&mut self, x: &Self::Value, epsilon: T) -> Result<Self::Value>;
    fn leaky_relu(&mut self, x: &Self::Value, slope: T) -> Result<Self::Value>;
    fn tanh(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// `tanh(a) ⊙ softmax_channels(b)`.
    fn gated_tanh(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Nearest-neighbor upsampling along time by an integer factor.
    fn upsample(&mut self, x: &Self::Value, factor: usize) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Contiguous time slice `[.., start..start+len]`.
    fn window(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    /// Split a `[1, samples]` waveform into `[bands, samples/bands]`.
    fn pqmf_analysis(&mut self, x: &Self::Value, bank: &Arc<PqmfBank<T>>) -> Result<Self::Value>;
    /// Magnitude spectrogram of a `[1, samples]` waveform.
    fn stft_magnitude(&mut self, x: &Self::Value, plan: &Arc<StftPlan<T>>)
        -> Result<Self::Value>;
    /// `‖ref − x‖_F / ‖ref‖_F` against a constant reference grid.
    fn spectral_convergence(
        &mut self,
        reference: &Arc<Tensor<T>>,
        x: &Self::Value,
    ) -> Result<Self::Value>;
    /// Mean `|ln(ref+ε) − ln(x+ε)|` against a constant reference grid.
    fn log_magnitude_loss(
        &mut self,
        reference: &Arc<Tensor<T>>,
        x: &Self::Value,
    ) -> Result<Self::Value>;
    fn mean_all(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// Elementwise `max(scale·x + shift, 0)` (hinge margins).
    fn relu_affine(&mut self, x: &Self::Value, scale: T, shift: T) -> Result<Self::Value>;
    /// `Σ wᵢ · xᵢ` over same-shape values.
    fn lin_comb(&mut self, terms: &[(T, Self::Value)]) -> Result<Self::Value>;
}

pub(crate) fn dims2<T: Real>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.dims() {
        [c, t] => Ok((*c, *t)),
        d => Err(Error::usage(format!(
            "expected a rank-2 [channels, time] value, found dims {d:?}"
        ))),
    }
}

fn single_channel_signal<T: Real>(x: &Tensor<T>) -> Result<usize> {
    let (c, t) = dims2(x)?;
    if c != 1 {
        return Err(Error::usage(format!(
            "expected a single-channel [1, samples] waveform, found {c} channels"
        )));
    }
    Ok(t)
}

pub(crate) struct WeightNormOut<T> {
    pub w: Tensor<T>,
    pub norms: Vec<T>,
}

pub(crate) fn vo_weight_norm<T: Real>(v: &Tensor<T>, g: &Tensor<T>) -> Result<WeightNormOut<T>> {
    let dims = v.dims();
    if dims.is_empty() || v.numel() == 0 {
        return Err(Error::usage("weight normalization needs a non-empty weight".to_string()));
    }
    let rows = dims[0];
    let cols = v.numel() / rows;
    if g.numel() != rows {
        return Err(Error::usage(format!(
            "weight normalization: {} magnitudes for {} rows",
            g.numel(),
            rows
        )));
    }
    let (w, norms) = weight_norm_fwd(v.data(), g.data(), rows, cols)?;
    Ok(WeightNormOut { w: Tensor::from_vec(dims, w)?, norms })
}

pub(crate) fn vo_conv1d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Result<Tensor<T>> {
    let (c_in, t_in) = dims2(x)?;
    if c_in != geom.in_channels {
        return Err(Error::usage(format!(
            "convolution expects {} input channels, found {}",
            geom.in_channels, c_in
        )));
    }
    let expected_w = geom.out_channels * geom.in_channels * geom.kernel_size;
    if w.numel() != expected_w {
        return Err(Error::usage(format!(
            "convolution weight has {} elements, expected {}",
            w.numel(),
            expected_w
        )));
    }
    if let Some(b) = bias {
        if b.numel() != geom.out_channels {
            return Err(Error::usage(format!(
                "convolution bias has {} elements for {} output channels",
                b.numel(),
                geom.out_channels
            )));
        }
    }
    let y = conv_forward(x.data(), t_in, w.data(), bias.map(|b| b.data()), geom);
    Tensor::from_vec(&[geom.out_channels, geom.out_time(t_in)], y)
}

pub(crate) fn vo_instance_norm<T: Real>(
    x: &Tensor<T>,
    epsilon: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (c, t) = dims2(x)?;
    if t == 0 {
        return Err(Error::usage("instance normalization over zero time steps".to_string()));
    }
    let (y, inv_std) = instance_norm_fwd(x.data(), c, t, epsilon);
    Ok((Tensor::from_vec(&[c, t], y)?, inv_std))
}

pub(crate) fn vo_leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    Tensor::from_vec(x.dims(), leaky_relu_fwd(x.data(), slope)).expect("shape preserved")
}

pub(crate) fn vo_tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(x.dims(), tanh_fwd(x.data())).expect("shape preserved")
}

pub(crate) fn vo_gated_tanh<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (c, t) = dims2(a)?;
    if a.dims() != b.dims() {
        return Err(Error::usage(format!(
            "gated activation branches differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (y, tanh_a, soft) = gated_tanh_fwd(a.data(), b.data(), c, t);
    Ok((Tensor::from_vec(&[c, t], y)?, tanh_a, soft))
}

pub(crate) fn vo_upsample<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, t) = dims2(x)?;
    if factor == 0 {
        return Err(Error::usage("upsampling factor must be at least 1".to_string()));
    }
    Tensor::from_vec(&[c, t * factor], resample_fwd(x.data(), c, t, factor))
}

pub(crate) fn vo_add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::usage(format!(
            "addition over different shapes: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.dims(), data)
}

pub(crate) fn vo_mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::usage(format!(
            "elementwise product over different shapes: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.dims(), data)
}

pub(crate) fn vo_window<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (c, t) = dims2(x)?;
    if len == 0 || start + len > t {
        return Err(Error::usage(format!(
            "window [{start}, {}) outside signal of {t} steps",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(c * len);
    for ch in 0..c {
        let row = &x.data()[ch * t..(ch + 1) * t];
        out.extend_from_slice(&row[start..start + len]);
    }
    Tensor::from_vec(&[c, len], out)
}

pub(crate) fn vo_pqmf_analysis<T: Real>(
    x: &Tensor<T>,
    bank: &PqmfBank<T>,
) -> Result<Tensor<T>> {
    let len = single_channel_signal(x)?;
    let sb = pqmf_analysis(&x.data()[..len], bank)?;
    let bands = sb.bands();
    let per_band = sb.samples_per_band();
    Tensor::from_vec(&[bands, per_band], sb.into_data())
}

pub(crate) fn vo_stft_magnitude<T: Real>(
    x: &Tensor<T>,
    plan: &StftPlan<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let len = single_channel_signal(x)?;
    stft_forward_parts(plan, &x.data()[..len])
}

pub(crate) fn vo_spectral_convergence<T: Real>(
    reference: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, T, T)> {
    let (loss, diff_norm, ref_norm) = sc_fwd(reference, x)?;
    Ok((Tensor::scalar(loss), diff_norm, ref_norm))
}

pub(crate) fn vo_log_magnitude<T: Real>(reference: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Tensor::scalar(logmag_fwd(reference, x)?))
}

pub(crate) fn vo_mean_all<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.numel() == 0 {
        return Err(Error::usage("mean of an empty value".to_string()));
    }
    let mut acc = T::zero();
    for &v in x.data() {
        acc += v;
    }
    Ok(Tensor::scalar(acc / T::from_usize_(x.numel())))
}

pub(crate) fn vo_relu_affine<T: Real>(x: &Tensor<T>, scale: T, shift: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let u = scale * v + shift;
            if u > T::zero() {
                u
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(x.dims(), data).expect("shape preserved")
}

pub(crate) fn vo_lin_comb<T: Real>(terms: &[(T, &Tensor<T>)]) -> Result<Tensor<T>> {
    let (_, first) = terms
        .first()
        .ok_or_else(|| Error::usage("linear combination of zero terms".to_string()))?;
    let dims = first.dims().to_vec();
    let mut out = Tensor::zeros(&dims);
    for (w, x) in terms {
        if x.dims() != dims.as_slice() {
            return Err(Error::usage(format!(
                "linear combination over different shapes: {:?} vs {:?}",
                dims,
                x.dims()
            )));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(x.data().iter()) {
            *o += *w * v;
        }
    }
    Ok(out)
}

/// Immediate execution: values are plain tensors, gradients are not
/// recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Real> Backend<T> for Eager {
    type Value = Tensor<T>;

    fn param(&mut self, _name: &str, value: Tensor<T>) -> Tensor<T> {
        value
    }

    fn constant(&mut self, value: Tensor<T>) -> Tensor<T> {
        value
    }

    fn read_scalar(&self, v: &Tensor<T>) -> Result<T> {
        v.scalar_value()
    }

    fn weight_norm(&mut self, v: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(vo_weight_norm(v, g)?.w)
    }

    fn conv1d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: &ConvGeom,
    ) -> Result<Tensor<T>> {
        vo_conv1d(x, w, bias, geom)
    }

    fn instance_norm(&mut self, x: &Tensor<T>, epsilon: T) -> Result<Tensor<T>> {
        Ok(vo_instance_norm(x, epsilon)?.0)
    }

    fn leaky_relu(&mut self, x: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
        Ok(vo_leaky_relu(x, slope))
    }

    fn tanh(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(vo_tanh(x))
    }

    fn gated_tanh(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(vo_gated_tanh(a, b)?.0)
    }

    fn upsample(&mut self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        vo_upsample(x, factor)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        vo_add(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        vo_mul(a, b)
    }

    fn window(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        vo_window(x, start, len)
    }

    fn pqmf_analysis(&mut self, x: &Tensor<T>, bank: &Arc<PqmfBank<T>>) -> Result<Tensor<T>> {
        vo_pqmf_analysis(x, bank.as_ref())
    }

    fn stft_magnitude(&mut self, x: &Tensor<T>, plan: &Arc<StftPlan<T>>) -> Result<Tensor<T>> {
        Ok(vo_stft_magnitude(x, plan.as_ref())?.0)
    }

    fn spectral_convergence(
        &mut self,
        reference: &Arc<Tensor<T>>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        Ok(vo_spectral_convergence(reference.as_ref(), x)?.0)
    }

    fn log_magnitude_loss(
        &mut self,
        reference: &Arc<Tensor<T>>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        vo_log_magnitude(reference.as_ref(), x)
    }

    fn mean_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        vo_mean_all(x)
    }

    fn relu_affine(&mut self, x: &Tensor<T>, scale: T, shift: T) -> Result<Tensor<T>> {
        Ok(vo_relu_affine(x, scale, shift))
    }

    fn lin_comb(&mut self, terms: &[(T, Tensor<T>)]) -> Result<Tensor<T>> {
        let borrowed: Vec<(T, &Tensor<T>)> = terms.iter().map(|(w, x)| (*w, x)).collect();
        vo_lin_comb(&borrowed)
    }
}

/// One weight-normalized convolution's parameters, generic over the
/// value representation (`Tensor` in storage, backend values once
/// bound).
#[derive(Debug, Clone)]
pub struct ConvParam<P> {
    pub spec: Conv1dSpec,
    pub stride: usize,
    /// Direction `v`, shaped `[out_channels, in_channels, kernel_size]`.
    pub direction: P,
    /// Per-output-row magnitude `g`, shaped `[out_channels]`.
    pub magnitude: P,
    /// Optional bias, shaped `[out_channels]`.
    pub bias: Option<P>,
}

impl<P> ConvParam<P> {
    /// Visit `(name, value)` pairs under `prefix` in declaration order:
    /// `.weight_v`, `.weight_g`, then `.bias` when present.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.weight_v"), &self.direction);
        f(format!("{prefix}.weight_g"), &self.magnitude);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        f(format!("{prefix}.weight_v"), &mut self.direction);
        f(format!("{prefix}.weight_g"), &mut self.magnitude);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    pub fn map_named<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> ConvParam<Q> {
        ConvParam {
            spec: self.spec,
            stride: self.stride,
            direction: f(&format!("{prefix}.weight_v"), &self.direction),
            magnitude: f(&format!("{prefix}.weight_g"), &self.magnitude),
            bias: self.bias.as_ref().map(|b| f(&format!("{prefix}.bias"), b)),
        }
    }

    /// Number of scalar parameters, counting `v`, `g`, and the bias.
    pub fn parameter_count(&self) -> usize {
        self.spec.weight_numel()
            + self.spec.out_channels
            + if self.bias.is_some() { self.spec.out_channels } else { 0 }
    }
}

impl<T: Real> ConvParam<Tensor<T>> {
    /// Bind the stored tensors onto a backend as named differentiable
    /// leaves.
    pub fn bind<B: Backend<T>>(&self, backend: &mut B, prefix: &str) -> ConvParam<B::Value> {
        self.map_named(prefix, &mut |name, t| backend.param(name, t.clone()))
    }

    /// Bind the stored tensors onto a backend as constants (the frozen
    /// player during the other player's update).
    pub fn bind_constant<B: Backend<T>>(&self, backend: &mut B) -> ConvParam<B::Value> {
        self.map_named("", &mut |_, t| backend.constant(t.clone()))
    }
}

/// Apply a weight-normalized convolution through a backend.
pub fn conv_wn<T: Real, B: Backend<T>>(
    backend: &mut B,
    p: &ConvParam<B::Value>,
    x: &B::Value,
) -> Result<B::Value> {
    let w = backend.weight_norm(&p.direction, &p.magnitude)?;
    let geom = ConvGeom::from_spec(&p.spec, p.stride);
    backend.conv1d(x, &w, p.bias.as_ref(), &geom)
}

/// Fresh weight-normalized convolution parameters: directions drawn
/// from N(0, 0.02²), magnitudes set to the direction row norms (so the
/// initial effective weight equals the raw direction), bias zero.
pub fn init_conv_param<T: Real, R: Rng>(
    spec: Conv1dSpec,
    stride: usize,
    rng: &mut R,
) -> Result<ConvParam<Tensor<T>>> {
    spec.validate()?;
    let normal = Normal::new(0.0f64, INIT_WEIGHT_STD).expect("valid std");
    let n = spec.weight_numel();
    let v: Vec<T> = (0..n).map(|_| T::from_f64_(normal.sample(rng))).collect();
    let rows = spec.out_channels;
    let cols = n / rows;
    let ones = vec![T::one(); rows];
    let (_, norms) = weight_norm_fwd(&v, &ones, rows, cols)?;
    Ok(ConvParam {
        spec,
        stride,
        direction: Tensor::from_vec(&spec.weight_dims(), v)?,
        magnitude: Tensor::from_vec(&[rows], norms)?,
        bias: if spec.has_bias {
            Some(Tensor::zeros(&[spec.out_channels]))
        } else {
            None
        },
    })
}
