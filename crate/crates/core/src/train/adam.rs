//! Adam optimizer with per-parameter first and second moment estimates.
//!
//! The moment tables are keyed by parameter name and created lazily, so the
//! same optimizer state works for any parameter collection that exposes a
//! named visitor. Updates use the bias-corrected estimates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::num::Real;
use crate::tensor::Tensor;
use crate::train::tape::TapeGradients;

/// Exponential decay rate of the first moment estimate.
pub const ADAM_BETA1: f64 = 0.5;
/// Exponential decay rate of the second moment estimate.
pub const ADAM_BETA2: f64 = 0.9;
/// Denominator fuzz that keeps the update finite at zero second moment.
pub const ADAM_EPSILON: f64 = 1e-8;

/// Optimizer state: step counter plus lazily created moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState { step: 0, moments: BTreeMap::new() }
    }

    /// Number of update steps applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Serialize the optimizer state as named tensors under `prefix`:
    /// `{prefix}.t` (step counter), `{prefix}.m.{name}`, `{prefix}.v.{name}`.
    pub fn export(&self, prefix: &str, f: &mut impl FnMut(String, Tensor<T>)) {
        f(format!("{prefix}.t"), Tensor::from_vec(&[1], vec![T::from_f64_(self.step as f64)])
            .expect("one-element tensor"));
        for (name, (m, v)) in &self.moments {
            f(format!("{prefix}.m.{name}"), m.clone());
            f(format!("{prefix}.v.{name}"), v.clone());
        }
    }

    /// Rebuild optimizer state from tensors previously written by
    /// [`AdamState::export`] under the same prefix. Missing moments stay
    /// lazily unset; a missing step counter means a fresh optimizer.
    pub fn import(prefix: &str, tensors: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut state = AdamState::new();
        if let Some(t) = tensors.get(&format!("{prefix}.t")) {
            let raw = *t.data().first().ok_or_else(|| {
                Error::config(format!("optimizer step counter {prefix}.t is empty"))
            })?;
            let as_f64 = raw.to_f64().unwrap_or(-1.0);
            if as_f64 < 0.0 || as_f64.fract() != 0.0 {
                return Err(Error::config(format!(
                    "optimizer step counter {prefix}.t holds {as_f64}, expected a whole number"
                )));
            }
            state.step = as_f64 as u64;
        }
        let m_prefix = format!("{prefix}.m.");
        for (key, tensor) in tensors {
            if let Some(name) = key.strip_prefix(&m_prefix) {
                let v_key = format!("{prefix}.v.{name}");
                let v = tensors.get(&v_key).ok_or_else(|| {
                    Error::config(format!("optimizer moment {v_key} missing from checkpoint"))
                })?;
                if v.dims() != tensor.dims() {
                    return Err(Error::config(format!(
                        "optimizer moments for {name} disagree on shape: {:?} vs {:?}",
                        tensor.dims(),
                        v.dims()
                    )));
                }
                state.moments.insert(name.to_string(), (tensor.clone(), v.clone()));
            }
        }
        Ok(state)
    }
}

/// Apply one Adam update to every `(name, tensor)` pair using the matching
/// gradient. A missing gradient counts as exactly zero (the moments still
/// decay). Gradient shape mismatches are configuration errors. The optional
/// `clip` bounds each raw gradient entry to `[-clip, clip]` before the
/// moment update.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    params: Vec<(String, &mut Tensor<T>)>,
    grads: &TapeGradients<T>,
    lr: T,
    clip: Option<T>,
) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(c) = clip {
        if !(c > T::zero()) {
            return Err(Error::config(format!("gradient clip must be positive, got {c}")));
        }
    }
    state.step += 1;
    let t = state.step;
    let b1 = T::from_f64_(ADAM_BETA1);
    let b2 = T::from_f64_(ADAM_BETA2);
    let eps = T::from_f64_(ADAM_EPSILON);
    let bias1 = T::one() - T::from_f64_(ADAM_BETA1.powi(t as i32));
    let bias2 = T::one() - T::from_f64_(ADAM_BETA2.powi(t as i32));

    for (name, param) in params {
        let zero_grad;
        let grad = match grads.get(&name) {
            Some(g) => {
                if g.dims() != param.dims() {
                    return Err(Error::config(format!(
                        "gradient for {name} has shape {:?}, parameter has {:?}",
                        g.dims(),
                        param.dims()
                    )));
                }
                g
            }
            None => {
                zero_grad = Tensor::zeros(param.dims());
                &zero_grad
            }
        };
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (Tensor::zeros(param.dims()), Tensor::zeros(param.dims())));
        if m.dims() != param.dims() {
            return Err(Error::config(format!(
                "optimizer moments have shape {:?}, parameter has {:?}",
                m.dims(),
                param.dims()
            )));
        }
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data().iter())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            let mut g = *g;
            if let Some(c) = clip {
                g = g.max(-c).min(c);
            }
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn single(name: &str, values: Vec<f64>) -> (String, Tensor<f64>) {
        (name.to_string(), Tensor::from_vec(&[values.len()], values).unwrap())
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (name, mut p) = single("w", vec![1.0, -2.0, 0.5]);
        let before = p.data().to_vec();
        let mut grads: HashMap<String, Tensor<f64>> = HashMap::new();
        grads.insert(
            name.clone(),
            Tensor::from_vec(&[3], vec![0.3, -1.7, 4.0]).unwrap(),
        );
        let mut state = AdamState::new();
        let lr = 1e-2;
        adam_step(&mut state, vec![(name.clone(), &mut p)], &grads, lr, None).unwrap();
        let signs = [1.0, -1.0, 1.0];
        for ((a, b), s) in p.data().iter().zip(before.iter()).zip(signs.iter()) {
            let delta = a - b;
            assert!(
                (delta + lr * s).abs() < 1e-6,
                "step {delta} should be close to {}",
                -lr * s
            );
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_with_fresh_state_leaves_parameters_unchanged() {
        let (name, mut p) = single("w", vec![0.25, -0.75]);
        let before = p.data().to_vec();
        let mut grads: HashMap<String, Tensor<f64>> = HashMap::new();
        grads.insert(name.clone(), Tensor::zeros(&[2]));
        let mut state = AdamState::new();
        adam_step(&mut state, vec![(name.clone(), &mut p)], &grads, 0.1, None).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn zero_gradient_decays_existing_moments() {
        let (name, mut p) = single("w", vec![1.0]);
        let mut grads: HashMap<String, Tensor<f64>> = HashMap::new();
        grads.insert(name.clone(), Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let mut state = AdamState::new();
        adam_step(&mut state, vec![(name.clone(), &mut p)], &grads, 0.1, None).unwrap();
        let (m1, v1) = {
            let (m, v) = state.moments.get("w").unwrap();
            (m.data()[0], v.data()[0])
        };
        grads.insert(name.clone(), Tensor::zeros(&[1]));
        adam_step(&mut state, vec![(name.clone(), &mut p)], &grads, 0.1, None).unwrap();
        let (m2, v2) = {
            let (m, v) = state.moments.get("w").unwrap();
            (m.data()[0], v.data()[0])
        };
        assert!((m2 - ADAM_BETA1 * m1).abs() < 1e-15);
        assert!((v2 - ADAM_BETA2 * v1).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_treated_as_zero() {
        let (name, mut p) = single("w", vec![3.0]);
        let grads: HashMap<String, Tensor<f64>> = HashMap::new();
        let mut state = AdamState::new();
        adam_step(&mut state, vec![(name, &mut p)], &grads, 0.1, None).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn gradient_shape_mismatch_is_a_config_error() {
        let (name, mut p) = single("w", vec![1.0, 2.0]);
        let mut grads: HashMap<String, Tensor<f64>> = HashMap::new();
        grads.insert(name.clone(), Tensor::zeros(&[3]));
        let mut state = AdamState::new();
        let err =
            adam_step(&mut state, vec![(name, &mut p)], &grads, 0.1, None).unwrap_err();
        assert!(matches!(err, crate::error::Error::Config(_)), "{err}");
    }

    #[test]
    fn clipping_bounds_the_raw_gradient() {
        let (name, mut p) = single("w", vec![0.0]);
        let mut grads: HashMap<String, Tensor<f64>> = HashMap::new();
        grads.insert(name.clone(), Tensor::from_vec(&[1], vec![100.0]).unwrap());
        let mut state = AdamState::new();
        adam_step(&mut state, vec![(name.clone(), &mut p)], &grads, 0.1, Some(1.0)).unwrap();

        let (name2, mut q) = single("w", vec![0.0]);
        let mut grads2: HashMap<String, Tensor<f64>> = HashMap::new();
        grads2.insert(name2.clone(), Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut state2 = AdamState::new();
        adam_step(&mut state2, vec![(name2, &mut q)], &grads2, 0.1, Some(1.0)).unwrap();
        assert_eq!(p.data()[0].to_bits(), q.data()[0].to_bits());
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let run = || {
            let (name, mut p) = single("w", vec![1.0, -1.0]);
            let mut state = AdamState::new();
            for k in 0..20 {
                let mut grads: HashMap<String, Tensor<f64>> = HashMap::new();
                let g = vec![(k as f64 * 0.1).sin(), (k as f64 * 0.2).cos()];
                grads.insert(name.clone(), Tensor::from_vec(&[2], g).unwrap());
                adam_step(&mut state, vec![(name.clone(), &mut p)], &grads, 3e-3, None)
                    .unwrap();
            }
            p.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn export_import_round_trip_preserves_state() {
        let (name, mut p) = single("w", vec![1.0, 2.0]);
        let mut state = AdamState::new();
        for _ in 0..3 {
            let mut grads: HashMap<String, Tensor<f64>> = HashMap::new();
            grads.insert(name.clone(), Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap());
            adam_step(&mut state, vec![(name.clone(), &mut p)], &grads, 0.01, None).unwrap();
        }
        let mut blob: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        state.export("opt.gen", &mut |k, t| {
            blob.insert(k, t);
        });
        let restored = AdamState::import("opt.gen", &blob).unwrap();
        assert_eq!(restored.step_count(), state.step_count());
        let (m0, v0) = state.moments.get("w").unwrap();
        let (m1, v1) = restored.moments.get("w").unwrap();
        assert_eq!(m0.data(), m1.data());
        assert_eq!(v0.data(), v1.data());
    }
}
