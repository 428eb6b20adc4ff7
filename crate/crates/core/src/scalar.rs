//! Floating point element type shared by every numeric routine in the workspace.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Besides the usual arithmetic bounds this carries a dense matrix product so
/// that convolution and attention kernels can stay generic.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short dtype tag used in checkpoints ("f32" / "f64").
    const DTYPE: &'static str;

    /// Converts an `f64` literal.
    fn lit(x: f64) -> Self;

    /// `C <- alpha * A * B + beta * C` for row/column-strided operands.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`. Strides are in elements.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, in-bounds matrices and `c`
    /// must not alias `a` or `b`.
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
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Matrix layout of one gemm operand inside a flat slice.
#[derive(Debug, Clone, Copy)]
pub struct MatRef {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatRef {
    /// Dense row-major `rows x cols`.
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of a dense row-major `rows x cols` matrix, viewed as `cols x rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self { rows: cols, cols: rows, row_stride: 1, col_stride: cols }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// Bounds-checked `c = alpha * a * b + beta * c`.
pub fn gemm<F: Scalar>(alpha: F, a: &[F], la: MatRef, b: &[F], lb: MatRef, beta: F, c: &mut [F], lc: MatRef) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!((la.rows, lb.cols), (lc.rows, lc.cols), "gemm output shape");
    assert!(a.len() >= la.extent() && b.len() >= lb.extent() && c.len() >= lc.extent());
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    // SAFETY: extents checked above; `c` is a unique borrow so it cannot alias `a`/`b`.
    unsafe {
        F::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}
