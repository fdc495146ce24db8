//! Activations: leaky ReLU, tanh, and the softmax-gated tanh used by the
//! generator's residual blocks.

use crate::error::{Error, Result};
use crate::num::Real;

use super::FeatureMap;

pub(crate) fn leaky_relu_fwd<T: Real>(x: &[T], slope: T) -> Vec<T> {
    x.iter().map(|&v| if v >= T::zero() { v } else { slope * v }).collect()
}

/// Backward kernel; the subgradient at exactly zero takes the positive
/// branch.
pub(crate) fn leaky_relu_vjp<T: Real>(dy: &[T], x: &[T], slope: T) -> Vec<T> {
    dy.iter()
        .zip(x.iter())
        .map(|(&d, &v)| if v >= T::zero() { d } else { slope * d })
        .collect()
}

pub(crate) fn tanh_fwd<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Backward kernel in terms of the output: `dx = dy · (1 − y²)`.
pub(crate) fn tanh_vjp<T: Real>(dy: &[T], y: &[T]) -> Vec<T> {
    dy.iter().zip(y.iter()).map(|(&d, &v)| d * (T::one() - v * v)).collect()
}

/// Forward kernel of `tanh(a) ⊙ softmax_channels(b)`. Returns
/// `(out, tanh_a, softmax_b)`; the two factor maps feed the backward
/// pass. Softmax runs across channels independently at each time step,
/// with max subtraction for overflow safety.
pub(crate) fn gated_tanh_fwd<T: Real>(
    a: &[T],
    b: &[T],
    channels: usize,
    time: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let tanh_a = tanh_fwd(a);
    let mut soft = vec![T::zero(); channels * time];
    for t in 0..time {
        let mut max = T::neg_infinity();
        for c in 0..channels {
            max = max.max(b[c * time + t]);
        }
        let mut denom = T::zero();
        for c in 0..channels {
            let e = (b[c * time + t] - max).exp();
            soft[c * time + t] = e;
            denom += e;
        }
        for c in 0..channels {
            soft[c * time + t] /= denom;
        }
    }
    let out = tanh_a.iter().zip(soft.iter()).map(|(&x, &s)| x * s).collect();
    (out, tanh_a, soft)
}

/// Backward kernel. With `g = softmax(b)` and `q = dy ⊙ tanh(a)`:
/// `da = dy · g · (1 − tanh²(a))`, `db = g ⊙ (q − Σ_c q·g)` per time step.
pub(crate) fn gated_tanh_vjp<T: Real>(
    dy: &[T],
    tanh_a: &[T],
    soft: &[T],
    channels: usize,
    time: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); channels * time];
    let mut db = vec![T::zero(); channels * time];
    for ((d, &dyv), (&ta, &s)) in
        da.iter_mut().zip(dy.iter()).zip(tanh_a.iter().zip(soft.iter()))
    {
        *d = dyv * s * (T::one() - ta * ta);
    }
    for t in 0..time {
        let mut dot = T::zero();
        for c in 0..channels {
            let idx = c * time + t;
            dot += dy[idx] * tanh_a[idx] * soft[idx];
        }
        for c in 0..channels {
            let idx = c * time + t;
            db[idx] = soft[idx] * (dy[idx] * tanh_a[idx] - dot);
        }
    }
    (da, db)
}

/// `out = x` for `x ≥ 0`, `slope · x` otherwise.
pub fn leaky_relu<T: Real>(x: &FeatureMap<T>, slope: T) -> FeatureMap<T> {
    FeatureMap::from_vec(x.channels(), x.time(), leaky_relu_fwd(x.data(), slope))
        .expect("shape preserved")
}

/// Elementwise hyperbolic tangent.
pub fn tanh_map<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap::from_vec(x.channels(), x.time(), tanh_fwd(x.data())).expect("shape preserved")
}

/// `tanh(a) ⊙ softmax_channels(b)`; the gate forms a probability
/// distribution over channels at each time step.
pub fn softmax_gated_tanh<T: Real>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    if a.channels() != b.channels() || a.time() != b.time() {
        return Err(Error::config(format!(
            "gated activation shape mismatch: {}x{} vs {}x{}",
            a.channels(),
            a.time(),
            b.channels(),
            b.time()
        )));
    }
    let (out, _, _) = gated_tanh_fwd(a.data(), b.data(), a.channels(), a.time());
    FeatureMap::from_vec(a.channels(), a.time(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn leaky_relu_definition() {
        let x = FeatureMap::from_rows(&[vec![1.0f64, -1.0]]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data(), &[1.0, -0.2]);
        let x = FeatureMap::from_rows(&[vec![-10.0f64]]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[-2.0]);
    }

    #[test]
    fn leaky_relu_identity_on_positives() {
        let x = FeatureMap::from_rows(&[vec![0.0f32, 0.5, 7.25]]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), x.data());
    }

    #[test]
    fn zero_signal_gives_zero_gate_output() {
        let a = FeatureMap::zeros(3, 4);
        let b = FeatureMap::from_rows(&[vec![1.0f64; 4], vec![-2.0; 4], vec![0.5; 4]]).unwrap();
        let y = softmax_gated_tanh(&a, &b).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn uniform_gate_for_constant_channels() {
        let a = FeatureMap::from_rows(&[vec![10.0f64], vec![10.0]]).unwrap();
        let b = FeatureMap::from_rows(&[vec![0.0f64], vec![0.0]]).unwrap();
        let y = softmax_gated_tanh(&a, &b).unwrap();
        let want = 0.5 * 10.0f64.tanh();
        for &v in y.data() {
            assert!((v - want).abs() < 1e-12);
            assert!((v - 0.5).abs() < 1e-4);
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = FeatureMap::zeros(2, 3);
        let b = FeatureMap::zeros(2, 4);
        assert!(matches!(softmax_gated_tanh::<f64>(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn gated_backward_matches_finite_differences() {
        let (c, t) = (3usize, 2usize);
        let a: Vec<f64> = vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9];
        let b: Vec<f64> = vec![0.1, 0.8, -0.4, 1.2, 0.6, -0.9];
        let coeff: Vec<f64> = (0..c * t).map(|i| ((i * 3 + 2) % 5) as f64 / 2.0 - 1.0).collect();
        let objective = |av: &[f64], bv: &[f64]| -> f64 {
            let (y, _, _) = gated_tanh_fwd(av, bv, c, t);
            y.iter().zip(coeff.iter()).map(|(v, w)| v * w).sum()
        };
        let (_, tanh_a, soft) = gated_tanh_fwd(&a, &b, c, t);
        let (da, db) = gated_tanh_vjp(&coeff, &tanh_a, &soft, c, t);
        let h = 1e-6;
        for j in 0..a.len() {
            let mut ap = a.clone();
            ap[j] += h;
            let mut am = a.clone();
            am[j] -= h;
            let fd = (objective(&ap, &b) - objective(&am, &b)) / (2.0 * h);
            assert!((fd - da[j]).abs() < 1e-6, "da[{j}]: fd {fd} vs {}", da[j]);
        }
        for j in 0..b.len() {
            let mut bp = b.clone();
            bp[j] += h;
            let mut bm = b.clone();
            bm[j] -= h;
            let fd = (objective(&a, &bp) - objective(&a, &bm)) / (2.0 * h);
            assert!((fd - db[j]).abs() < 1e-6, "db[{j}]: fd {fd} vs {}", db[j]);
        }
    }

    proptest! {
        #[test]
        fn gate_sums_to_one(seed in 0u64..400) {
            let (c, t) = (4usize, 6usize);
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(12345);
            let mut nextf = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(12345);
                ((state >> 33) as f64 / (1u64 << 31) as f64) * 8.0 - 4.0
            };
            let a: Vec<f64> = (0..c * t).map(|_| nextf()).collect();
            let b: Vec<f64> = (0..c * t).map(|_| nextf()).collect();
            let (_, _, soft) = gated_tanh_fwd(&a, &b, c, t);
            for ti in 0..t {
                let sum: f64 = (0..c).map(|ci| soft[ci * t + ti]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
