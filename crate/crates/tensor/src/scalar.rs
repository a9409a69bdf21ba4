use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training and inference) and `f64` (gradient
/// checking). Matrix products go through the `matrixmultiply` kernels.
pub trait Scalar:
    Float
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// Softmax entries with `x − max` below this are set to exactly zero.
    /// For f32 this keeps negligible weights from turning into subnormals,
    /// which are very slow in the downstream products.
    const SOFTMAX_FLOOR: f64;

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `exp` for bulk kernels. The f32 version is a branch-free polynomial
    /// that vectorizes; it agrees with `f32::exp` to within 2 ulp.
    #[inline]
    fn exp_bulk(self) -> Self {
        self.exp()
    }

    /// `C = alpha * A * B + beta * C` over raw strided storage.
    ///
    /// # Safety
    /// Every addressed element must lie inside the allocations behind the
    /// pointers, and `c` must not alias `a` or `b`.
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
    const NAME: &'static str = "f32";
    const SOFTMAX_FLOOR: f64 = -40.0;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn exp_bulk(self) -> Self {
        expf(self)
    }

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const SOFTMAX_FLOOR: f64 = -700.0;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided matrix view into a slice: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Clone, Copy, Debug)]
pub struct Strided {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Strided {
    pub const fn new(offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Strided { offset, row_stride, col_stride }
    }

    /// Row-major dense layout with `cols` columns.
    pub const fn rows(cols: usize) -> Self {
        Strided { offset: 0, row_stride: cols, col_stride: 1 }
    }

    pub const fn at(self, offset: usize) -> Self {
        Strided { offset, ..self }
    }

    pub const fn transposed(self) -> Self {
        Strided { offset: self.offset, row_stride: self.col_stride, col_stride: self.row_stride }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
    }
}

/// Bounds-checked `C = A * B + beta * C` with `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Strided,
    b: &[T],
    lb: Strided,
    beta: T,
    c: &mut [T],
    lc: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(la.span(m, k) <= a.len(), "gemm: A view out of bounds");
    assert!(lb.span(k, n) <= b.len(), "gemm: B view out of bounds");
    assert!(lc.span(m, n) <= c.len(), "gemm: C view out of bounds");
    // SAFETY: spans checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        )
    }
}

// Cephes-style expf: split x = n·ln2 + r, evaluate a degree-7 polynomial on
// r and scale by 2ⁿ through the exponent bits. Inputs are clamped, so the
// result saturates to the smallest normal or to a large finite value.
#[inline(always)]
fn expf(x: f32) -> f32 {
    const SHIFTER: f32 = 12_582_912.0; // 1.5·2²³, forces round-to-nearest
    let x = if x < -87.0 { -87.0 } else { x };
    let x = if x > 88.0 { 88.0 } else { x };
    let shifted = x * std::f32::consts::LOG2_E + SHIFTER;
    // The low mantissa bits of `shifted` hold n as a two's-complement offset.
    let n_bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits());
    let n = shifted - SHIFTER;
    let r = x - n * 0.693_359_4 - n * -2.121_944_4e-4;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 0.166_666_65) * r + 0.5;
    let y = p * r * r + r + 1.0;
    let scale = f32::from_bits(n_bits.wrapping_add(127) << 23);
    y * scale
}
