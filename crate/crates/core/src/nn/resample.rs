//! Nearest-neighbor upsampling along the time axis.

use crate::error::{Error, Result};
use crate::num::Real;

use super::FeatureMap;

/// Forward kernel: `out[c][t] = x[c][t / factor]`.
pub(crate) fn resample_fwd<T: Real>(
    x: &[T],
    channels: usize,
    time: usize,
    factor: usize,
) -> Vec<T> {
    let t_out = time * factor;
    let mut y = vec![T::zero(); channels * t_out];
    for c in 0..channels {
        let src = &x[c * time..(c + 1) * time];
        let dst = &mut y[c * t_out..(c + 1) * t_out];
        for (u, &v) in src.iter().enumerate() {
            dst[u * factor..(u + 1) * factor].fill(v);
        }
    }
    y
}

/// Backward kernel: each input sample collects the gradients of the
/// `factor` outputs it fed.
pub(crate) fn resample_vjp<T: Real>(
    dy: &[T],
    channels: usize,
    time: usize,
    factor: usize,
) -> Vec<T> {
    let t_out = time * factor;
    let mut dx = vec![T::zero(); channels * time];
    for c in 0..channels {
        let src = &dy[c * t_out..(c + 1) * t_out];
        let dst = &mut dx[c * time..(c + 1) * time];
        for (u, o) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &v in &src[u * factor..(u + 1) * factor] {
                acc += v;
            }
            *o = acc;
        }
    }
    dx
}

/// Repeat every time step `factor` times.
pub fn upsample_nearest<T: Real>(x: &FeatureMap<T>, factor: usize) -> Result<FeatureMap<T>> {
    if factor == 0 {
        return Err(Error::config("upsampling factor must be at least 1"));
    }
    let y = resample_fwd(x.data(), x.channels(), x.time(), factor);
    FeatureMap::from_vec(x.channels(), x.time() * factor, y)
}

/// Nearest-neighbor resample to an exact target length, which must be an
/// integer multiple of the current length.
pub fn resample_nearest<T: Real>(x: &FeatureMap<T>, new_time: usize) -> Result<FeatureMap<T>> {
    if x.time() == 0 || new_time % x.time() != 0 {
        return Err(Error::config(format!(
            "cannot resample {} steps to {} steps with an integer factor",
            x.time(),
            new_time
        )));
    }
    upsample_nearest(x, new_time / x.time())
}
