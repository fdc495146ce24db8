//! Dilated 1-D convolution with symmetric zero "same" padding, plus the
//! backward kernels for input, weight, and bias.
//!
//! The accumulation order is fixed and kernel-major: for every output
//! element the kernel taps are summed in ascending tap order, each tap
//! contributing a rank-`in_channels` product with a fixed internal
//! reduction order. Large kernels fan work out over the current thread
//! pool in *fixed-size* channel chunks: the chunk boundaries — and with
//! them every matrix-product shape — depend only on the layer shapes,
//! never on how many threads happen to execute the chunks. Results are
//! therefore bit-reproducible across runs on one machine regardless of
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::num::{gemm, MatView, Real};
use crate::tensor::Tensor;

use super::FeatureMap;

/// Channels per parallel work unit. Fixed (instead of derived from the
/// pool size) so the issued matrix-product shapes are identical for
/// every thread count.
const PAR_CHANNEL_CHUNK: usize = 16;

/// Multiply count below which fanning out is not worth the scheduling
/// overhead and the kernel stays on the calling thread.
const PAR_MIN_WORK: usize = 1 << 18;

fn should_parallelize(rows: usize, work: usize) -> bool {
    rows > PAR_CHANNEL_CHUNK && work >= PAR_MIN_WORK
}

/// Static shape of one convolution layer. Padding is always symmetric
/// zero "same" padding, so at stride 1 output time equals input time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub has_bias: bool,
}

impl Conv1dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Conv1dSpec { in_channels, out_channels, kernel_size, dilation: 1, has_bias: true }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("convolution channel counts must be positive"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.dilation == 0 {
            return Err(Error::config("dilation must be at least 1"));
        }
        Ok(())
    }

    /// Receptive field in input samples: `(K-1)*dilation + 1`.
    pub fn receptive_field(&self) -> usize {
        (self.kernel_size - 1) * self.dilation + 1
    }

    pub fn weight_dims(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels, self.kernel_size]
    }

    pub fn weight_numel(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size
    }
}

/// Geometry of one convolution application; `stride` decimates the
/// output (used by the discriminator's downsampling blocks).
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn from_spec(spec: &Conv1dSpec, stride: usize) -> Self {
        ConvGeom {
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel_size: spec.kernel_size,
            dilation: spec.dilation,
            stride,
        }
    }

    pub fn out_time(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.stride)
    }

    /// Signed input offset of kernel tap `k` relative to the output
    /// center: `(k - K/2) * dilation`.
    fn tap_offset(&self, k: usize) -> isize {
        (k as isize - (self.kernel_size / 2) as isize) * self.dilation as isize
    }

    /// Output index range `[lo, hi)` for which tap `k` reads inside
    /// `[0, t_in)`; outside the range the zero padding contributes
    /// nothing.
    fn valid_range(&self, k: usize, t_in: usize, t_out: usize) -> (usize, usize) {
        let s = self.tap_offset(k);
        let lo = if s >= 0 { 0 } else { ((-s) as usize).div_ceil(self.stride) };
        let hi = if (t_in as isize) > s {
            ((t_in as isize - 1 - s) as usize / self.stride + 1).min(t_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Forward kernel: `out[o][t] = b[o] + Σ_k Σ_i w[o][i][k] · x[i][t·stride + (k−⌊K/2⌋)·dilation]`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    t_in: usize,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let t_out = g.out_time(t_in);
    let (o_c, i_c, k_sz) = (g.out_channels, g.in_channels, g.kernel_size);
    debug_assert_eq!(x.len(), i_c * t_in);
    debug_assert_eq!(w.len(), o_c * i_c * k_sz);

    let mut out = vec![T::zero(); o_c * t_out];
    if let Some(b) = bias {
        debug_assert_eq!(b.len(), o_c);
        for (o, row) in out.chunks_mut(t_out).enumerate() {
            row.fill(b[o]);
        }
    }
    if t_in == 0 {
        return out;
    }
    let rows_of = |o0: usize, rows: usize, out_rows: &mut [T]| {
        for k in 0..k_sz {
            let (lo, hi) = g.valid_range(k, t_in, t_out);
            if lo >= hi {
                continue;
            }
            let b_off = (lo * g.stride) as isize + g.tap_offset(k);
            gemm(
                rows,
                i_c,
                hi - lo,
                T::one(),
                w,
                MatView::new(k + o0 * i_c * k_sz, i_c * k_sz, k_sz),
                x,
                MatView::new(b_off as usize, t_in, g.stride),
                T::one(),
                out_rows,
                MatView::new(lo, t_out, 1),
            );
        }
    };
    if should_parallelize(o_c, o_c * i_c * k_sz * t_out) {
        out.par_chunks_mut(PAR_CHANNEL_CHUNK * t_out).enumerate().for_each(|(ci, chunk)| {
            rows_of(ci * PAR_CHANNEL_CHUNK, chunk.len() / t_out, chunk);
        });
    } else {
        rows_of(0, o_c, &mut out);
    }
    out
}

/// Backward kernel w.r.t. the input: scatter of `Wᵀ · dy` over the same
/// tap geometry as the forward pass.
pub(crate) fn conv_backward_input<T: Real>(
    dy: &[T],
    t_in: usize,
    w: &[T],
    g: &ConvGeom,
) -> Vec<T> {
    let t_out = g.out_time(t_in);
    let (o_c, i_c, k_sz) = (g.out_channels, g.in_channels, g.kernel_size);
    debug_assert_eq!(dy.len(), o_c * t_out);

    let mut dx = vec![T::zero(); i_c * t_in];
    if t_in == 0 {
        return dx;
    }
    let rows_of = |i0: usize, rows: usize, dx_rows: &mut [T]| {
        for k in 0..k_sz {
            let (lo, hi) = g.valid_range(k, t_in, t_out);
            if lo >= hi {
                continue;
            }
            let c_off = (lo * g.stride) as isize + g.tap_offset(k);
            gemm(
                rows,
                o_c,
                hi - lo,
                T::one(),
                w,
                MatView::new(k + i0 * k_sz, k_sz, i_c * k_sz),
                dy,
                MatView::new(lo, t_out, 1),
                T::one(),
                dx_rows,
                MatView::new(c_off as usize, t_in, g.stride),
            );
        }
    };
    if should_parallelize(i_c, o_c * i_c * k_sz * t_out) {
        dx.par_chunks_mut(PAR_CHANNEL_CHUNK * t_in).enumerate().for_each(|(ci, chunk)| {
            rows_of(ci * PAR_CHANNEL_CHUNK, chunk.len() / t_in, chunk);
        });
    } else {
        rows_of(0, i_c, &mut dx);
    }
    dx
}

/// Backward kernel w.r.t. the weight: `dw[o][i][k] = Σ_t dy[o][t] · x[i][t·stride + tap_k]`.
pub(crate) fn conv_backward_weight<T: Real>(
    x: &[T],
    t_in: usize,
    dy: &[T],
    g: &ConvGeom,
) -> Vec<T> {
    let t_out = g.out_time(t_in);
    let (o_c, i_c, k_sz) = (g.out_channels, g.in_channels, g.kernel_size);
    let mut dw = vec![T::zero(); o_c * i_c * k_sz];
    if t_in == 0 {
        return dw;
    }
    let rows_of = |o0: usize, rows: usize, dw_rows: &mut [T]| {
        for k in 0..k_sz {
            let (lo, hi) = g.valid_range(k, t_in, t_out);
            if lo >= hi {
                continue;
            }
            let b_off = (lo * g.stride) as isize + g.tap_offset(k);
            gemm(
                rows,
                hi - lo,
                i_c,
                T::one(),
                dy,
                MatView::new(lo + o0 * t_out, t_out, 1),
                x,
                MatView::new(b_off as usize, g.stride, t_in),
                T::one(),
                dw_rows,
                MatView::new(k, i_c * k_sz, k_sz),
            );
        }
    };
    if should_parallelize(o_c, o_c * i_c * k_sz * t_out) {
        dw.par_chunks_mut(PAR_CHANNEL_CHUNK * i_c * k_sz).enumerate().for_each(|(ci, chunk)| {
            rows_of(ci * PAR_CHANNEL_CHUNK, chunk.len() / (i_c * k_sz), chunk);
        });
    } else {
        rows_of(0, o_c, &mut dw);
    }
    dw
}

/// Backward kernel w.r.t. the bias: per-output-channel sum of `dy`.
pub(crate) fn conv_backward_bias<T: Real>(dy: &[T], t_out: usize, out_channels: usize) -> Vec<T> {
    let mut db = vec![T::zero(); out_channels];
    for (o, row) in dy.chunks(t_out).enumerate().take(out_channels) {
        let mut acc = T::zero();
        for &v in row {
            acc += v;
        }
        db[o] = acc;
    }
    db
}

/// Dilated same-padding convolution of a feature map (stride 1).
pub fn conv1d<T: Real>(
    x: &FeatureMap<T>,
    spec: &Conv1dSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<FeatureMap<T>> {
    spec.validate()?;
    if x.channels() != spec.in_channels {
        return Err(Error::config(format!(
            "convolution expects {} input channels, feature map has {}",
            spec.in_channels,
            x.channels()
        )));
    }
    if weights.dims() != spec.weight_dims() {
        return Err(Error::config(format!(
            "weight dims {:?} do not match spec {:?}",
            weights.dims(),
            spec.weight_dims()
        )));
    }
    let bias_slice = match (spec.has_bias, bias) {
        (true, Some(b)) => {
            if b.dims() != [spec.out_channels] {
                return Err(Error::config(format!(
                    "bias dims {:?} do not match out_channels {}",
                    b.dims(),
                    spec.out_channels
                )));
            }
            Some(b.data())
        }
        (true, None) => {
            return Err(Error::config("spec declares a bias but none was supplied"));
        }
        (false, Some(_)) => {
            return Err(Error::config("spec declares no bias but one was supplied"));
        }
        (false, None) => None,
    };
    let geom = ConvGeom::from_spec(spec, 1);
    let out = conv_forward(x.data(), x.time(), weights.data(), bias_slice, &geom);
    FeatureMap::from_vec(spec.out_channels, x.time(), out)
}
