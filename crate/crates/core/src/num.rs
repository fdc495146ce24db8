//! Scalar abstraction for the numeric core.
//!
//! Every kernel in this crate is generic over [`Real`]. The training and
//! inference paths instantiate `f32`; gradient verification instantiates
//! `f64` so finite differences have enough headroom below the comparison
//! tolerance. Matrix products dispatch to the width-specific `matrixmultiply`
//! routine, which uses a fixed blocking schedule and is therefore
//! bit-reproducible across runs on one machine.

use num_traits::{Float, FromPrimitive, NumAssignOps};

pub trait Real:
    Float + FromPrimitive + NumAssignOps + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// General matrix multiply `C = alpha * A(m×k) · B(k×n) + beta * C(m×n)`
    /// on strided raw buffers.
    ///
    /// # Safety
    /// Every element addressed by the stride pattern must be in bounds;
    /// `c` must not alias `a` or `b`. Use [`gemm`] unless a raw call is
    /// unavoidable.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn from_usize_(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }

    fn to_f64_(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("conversion to f64")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided view of one operand of a matrix product: `base[off + r*rs + c*cs]`.
#[derive(Clone, Copy)]
pub struct MatView {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn new(off: usize, rs: usize, cs: usize) -> Self {
        MatView { off, rs, cs }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        debug_assert!(rows > 0 && cols > 0);
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked GEMM over slices: `C = alpha·A·B + beta·C` with A of
/// shape m×k, B of shape k×n, C of shape m×n, each addressed through a
/// [`MatView`].
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    va: MatView,
    b: &[T],
    vb: MatView,
    beta: T,
    c: &mut [T],
    vc: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // Degenerate product: C = beta * C.
        for r in 0..m {
            for cc in 0..n {
                let idx = vc.off + r * vc.rs + cc * vc.cs;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!(va.max_index(m, k) < a.len(), "gemm: A view out of bounds");
    assert!(vb.max_index(k, n) < b.len(), "gemm: B view out of bounds");
    assert!(vc.max_index(m, n) < c.len(), "gemm: C view out of bounds");
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3 row-major
        let b = [1.0f64, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2 row-major
        let mut c = [10.0f64, 10.0, 10.0, 10.0]; // 2x2
        gemm(
            2,
            3,
            2,
            1.0,
            &a,
            MatView::new(0, 3, 1),
            &b,
            MatView::new(0, 2, 1),
            0.5,
            &mut c,
            MatView::new(0, 2, 1),
        );
        // A·B = [[5,11],[14,23]]; plus 0.5*10 on each entry.
        assert_eq!(c, [10.0, 16.0, 19.0, 28.0]);
    }

    #[test]
    fn gemm_with_column_strides_reads_submatrix() {
        // B is every second column of a 2x6 buffer.
        let a = [1.0f32, 1.0]; // 1x2
        let buf: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let mut c = [0.0f32; 3];
        gemm(
            1,
            2,
            3,
            1.0,
            &a,
            MatView::new(0, 2, 1),
            &buf,
            MatView::new(0, 6, 2),
            0.0,
            &mut c,
            MatView::new(0, 3, 1),
        );
        // rows of B: [0,2,4] and [6,8,10]; column sums: 6, 10, 14.
        assert_eq!(c, [6.0, 10.0, 14.0]);
    }

    #[test]
    fn gemm_zero_inner_dimension_scales_c() {
        let a: [f64; 0] = [];
        let b: [f64; 0] = [];
        let mut c = [2.0f64, 4.0];
        gemm(
            1,
            0,
            2,
            1.0,
            &a,
            MatView::new(0, 1, 1),
            &b,
            MatView::new(0, 1, 1),
            0.5,
            &mut c,
            MatView::new(0, 2, 1),
        );
        assert_eq!(c, [1.0, 2.0]);
    }
}
