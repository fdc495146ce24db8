//! Instance normalization over the time axis with biased variance.

use crate::error::{Error, Result};
use crate::num::Real;

use super::FeatureMap;

/// Forward kernel. Returns the normalized map and the per-channel
/// reciprocal standard deviation needed by the backward pass.
pub(crate) fn instance_norm_fwd<T: Real>(
    x: &[T],
    channels: usize,
    time: usize,
    epsilon: T,
) -> (Vec<T>, Vec<T>) {
    debug_assert!(time >= 1);
    let mut y = vec![T::zero(); channels * time];
    let mut inv_std = vec![T::zero(); channels];
    let count = T::from_usize_(time);
    for c in 0..channels {
        let row = &x[c * time..(c + 1) * time];
        let mut sum = T::zero();
        for &v in row {
            sum += v;
        }
        let mean = sum / count;
        let mut sq = T::zero();
        for &v in row {
            let d = v - mean;
            sq += d * d;
        }
        let var = sq / count;
        let r = (var + epsilon).sqrt().recip();
        inv_std[c] = r;
        let out = &mut y[c * time..(c + 1) * time];
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = (v - mean) * r;
        }
    }
    (y, inv_std)
}

/// Backward kernel. With `y` the normalized output and `r` the
/// reciprocal standard deviation:
/// `dx = r · (dy − mean(dy) − y · mean(dy ⊙ y))` per channel.
pub(crate) fn instance_norm_vjp<T: Real>(
    dy: &[T],
    y: &[T],
    inv_std: &[T],
    channels: usize,
    time: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); channels * time];
    let count = T::from_usize_(time);
    for c in 0..channels {
        let dy_row = &dy[c * time..(c + 1) * time];
        let y_row = &y[c * time..(c + 1) * time];
        let mut sum_dy = T::zero();
        let mut sum_dyy = T::zero();
        for (&d, &v) in dy_row.iter().zip(y_row.iter()) {
            sum_dy += d;
            sum_dyy += d * v;
        }
        let mean_dy = sum_dy / count;
        let mean_dyy = sum_dyy / count;
        let r = inv_std[c];
        let out = &mut dx[c * time..(c + 1) * time];
        for ((o, &d), &v) in out.iter_mut().zip(dy_row.iter()).zip(y_row.iter()) {
            *o = r * (d - mean_dy - v * mean_dyy);
        }
    }
    dx
}

/// Per-channel standardization over time: `(x − mean) / sqrt(var + ε)`
/// with population (biased) variance.
pub fn instance_norm<T: Real>(x: &FeatureMap<T>, epsilon: T) -> Result<FeatureMap<T>> {
    if x.time() == 0 {
        return Err(Error::input("instance normalization needs at least one time step"));
    }
    let (y, _) = instance_norm_fwd(x.data(), x.channels(), x.time(), epsilon);
    FeatureMap::from_vec(x.channels(), x.time(), y)
}
