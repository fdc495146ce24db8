//! Weight normalization: `w = g · v / ‖v‖₂` per output channel.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::tensor::Tensor;

/// Direction/magnitude reparameterization of one weight tensor. The
/// direction has the underlying weight's shape; the magnitude holds one
/// scalar per output channel (the leading axis).
#[derive(Debug, Clone)]
pub struct WeightNormParam<T> {
    pub direction: Tensor<T>,
    pub magnitude: Tensor<T>,
}

/// Rows = output channels, cols = remaining elements per channel.
fn rows_cols<T: Real>(p: &WeightNormParam<T>) -> Result<(usize, usize)> {
    let dims = p.direction.dims();
    if dims.is_empty() {
        return Err(Error::config("weight-norm direction must have at least one axis"));
    }
    let rows = dims[0];
    if p.magnitude.dims() != [rows] {
        return Err(Error::config(format!(
            "weight-norm magnitude dims {:?} do not match {} output channels",
            p.magnitude.dims(),
            rows
        )));
    }
    Ok((rows, p.direction.numel() / rows))
}

/// Forward kernel. Returns the effective weight and the per-channel
/// direction norms needed by the backward pass. A zero-norm channel is a
/// numerical degeneracy.
pub(crate) fn weight_norm_fwd<T: Real>(
    v: &[T],
    g: &[T],
    rows: usize,
    cols: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut w = vec![T::zero(); rows * cols];
    let mut norms = vec![T::zero(); rows];
    for r in 0..rows {
        let vr = &v[r * cols..(r + 1) * cols];
        let mut sq = T::zero();
        for &x in vr {
            sq += x * x;
        }
        let n = sq.sqrt();
        if n == T::zero() {
            return Err(Error::degenerate(format!(
                "weight-norm direction for output channel {r} has zero norm"
            )));
        }
        norms[r] = n;
        let scale = g[r] / n;
        let out = &mut w[r * cols..(r + 1) * cols];
        for (o, &x) in out.iter_mut().zip(vr.iter()) {
            *o = x * scale;
        }
    }
    Ok((w, norms))
}

/// Backward kernel. With `v̂ = v/‖v‖` per channel:
/// `dg = dw · v̂` and `dv = (g/‖v‖) · (dw − (dw · v̂) v̂)`.
pub(crate) fn weight_norm_vjp<T: Real>(
    dw: &[T],
    v: &[T],
    g: &[T],
    norms: &[T],
    rows: usize,
    cols: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dv = vec![T::zero(); rows * cols];
    let mut dg = vec![T::zero(); rows];
    for r in 0..rows {
        let vr = &v[r * cols..(r + 1) * cols];
        let dwr = &dw[r * cols..(r + 1) * cols];
        let n = norms[r];
        let mut dot = T::zero();
        for (&d, &x) in dwr.iter().zip(vr.iter()) {
            dot += d * x;
        }
        let dot_unit = dot / n;
        dg[r] = dot_unit;
        let scale = g[r] / n;
        let out = &mut dv[r * cols..(r + 1) * cols];
        for ((o, &d), &x) in out.iter_mut().zip(dwr.iter()).zip(vr.iter()) {
            *o = scale * (d - dot_unit * x / n);
        }
    }
    (dv, dg)
}

/// Effective weight `g · v/‖v‖` with the norm taken per output channel.
pub fn apply_weight_norm<T: Real>(p: &WeightNormParam<T>) -> Result<Tensor<T>> {
    let (rows, cols) = rows_cols(p)?;
    let (w, _) = weight_norm_fwd(p.direction.data(), p.magnitude.data(), rows, cols)?;
    Tensor::from_vec(p.direction.dims(), w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: Vec<f64>, dims: &[usize], g: Vec<f64>) -> WeightNormParam<f64> {
        WeightNormParam {
            direction: Tensor::from_vec(dims, v).unwrap(),
            magnitude: Tensor::from_vec(&[dims[0]], g).unwrap(),
        }
    }

    #[test]
    fn unit_magnitude_normalizes_direction() {
        let p = param(vec![3.0, 4.0], &[1, 2], vec![1.0]);
        let w = apply_weight_norm(&p).unwrap();
        assert!((w.data()[0] - 0.6).abs() < 1e-12);
        assert!((w.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn magnitude_equal_to_norm_reproduces_direction() {
        let p = param(vec![3.0, 4.0], &[1, 2], vec![5.0]);
        let w = apply_weight_norm(&p).unwrap();
        assert_eq!(w.data(), &[3.0, 4.0]);
    }

    #[test]
    fn scale_invariance_of_direction() {
        let a = param(vec![0.3, -0.1, 0.7, 0.2], &[2, 2], vec![1.5, -0.4]);
        let b = param(vec![3.0, -1.0, 7.0, 2.0], &[2, 2], vec![1.5, -0.4]);
        let wa = apply_weight_norm(&a).unwrap();
        let wb = apply_weight_norm(&b).unwrap();
        for (x, y) in wa.data().iter().zip(wb.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_norm_equals_magnitude() {
        let p = param(vec![0.2, -0.9, 1.3, 0.4, 0.5, -0.6], &[2, 3], vec![2.5, -1.25]);
        let w = apply_weight_norm(&p).unwrap();
        for r in 0..2 {
            let row = &w.data()[r * 3..(r + 1) * 3];
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - p.magnitude.data()[r].abs()).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_norm_direction_is_degenerate() {
        let p = param(vec![0.0, 0.0], &[1, 2], vec![1.0]);
        assert!(matches!(apply_weight_norm(&p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let v: Vec<f64> = vec![0.3, -0.8, 1.1, 0.5, -0.2, 0.9];
        let g: Vec<f64> = vec![1.7, -0.6];
        let (rows, cols) = (2usize, 3usize);
        let coeff: Vec<f64> = (0..rows * cols).map(|i| ((i * 5 + 1) % 7) as f64 / 3.0 - 1.0).collect();
        let objective = |vv: &[f64], gv: &[f64]| -> f64 {
            let (w, _) = weight_norm_fwd(vv, gv, rows, cols).unwrap();
            w.iter().zip(coeff.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, norms) = weight_norm_fwd(&v, &g, rows, cols).unwrap();
        let (dv, dg) = weight_norm_vjp(&coeff, &v, &g, &norms, rows, cols);
        let h = 1e-6;
        for j in 0..v.len() {
            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            let fd = (objective(&vp, &g) - objective(&vm, &g)) / (2.0 * h);
            assert!((fd - dv[j]).abs() < 1e-5, "dv[{j}]: fd {fd} vs {}", dv[j]);
        }
        for j in 0..g.len() {
            let mut gp = g.clone();
            gp[j] += h;
            let mut gm = g.clone();
            gm[j] -= h;
            let fd = (objective(&v, &gp) - objective(&v, &gm)) / (2.0 * h);
            assert!((fd - dg[j]).abs() < 1e-5, "dg[{j}]: fd {fd} vs {}", dg[j]);
        }
    }
}
