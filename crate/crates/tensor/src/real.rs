use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Element type tag, also used as the on-disk dtype code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar usable as a tensor element. Implemented for `f32` (training)
/// and `f64` (gradient checking).
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    fn erf(self) -> Self;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the given extents.
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

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn erf(self) -> Self {
        erf_f32(self)
    }

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
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

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn lit(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
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

/// Error function in single precision, within 1.5e-7 of the exact value.
/// `x P(x^2)` on `|x| <= 1`, `1 - exp(Q(|x|))` on `1 < |x| < 4`, saturated beyond.
fn erf_f32(x: f32) -> f32 {
    const SMALL: [f32; 7] = [1.128_379_1, -0.376_126_05, 0.112_834_297, -0.026_848_584, 0.005_179_736_8, -0.000_794_225_5, 7.646_809e-5];
    const LARGE: [f32; 7] = [-0.000_352_930_36, -1.127_043_4, -0.638_219_95, -0.103_042_52, 0.021_807_875, -0.002_940_268_7, 0.000_185_643_67];
    let t = x.abs();
    if t <= 1.0 {
        let s = x * x;
        x * SMALL.iter().rev().fold(0.0f32, |acc, &c| acc * s + c)
    } else if t < 4.0 {
        let q = LARGE.iter().rev().fold(0.0f32, |acc, &c| acc * t + c);
        (1.0 - q.exp()).copysign(x)
    } else {
        1.0f32.copysign(x)
    }
}

/// A strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major matrix with `cols` columns starting at `offset`.
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Layout { offset, rs: cols, cs: 1 }
    }

    /// Row-major `rows x cols` matrix read as its transpose.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Layout { offset, rs: 1, cs: cols }
    }

    /// Row-major with an explicit row stride (for column slices of wider rows).
    pub fn strided(offset: usize, row_stride: usize) -> Self {
        Layout { offset, rs: row_stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        Layout { offset: self.offset, rs: self.cs, cs: self.rs }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows.saturating_sub(1)) * self.rs + (cols.saturating_sub(1)) * self.cs
    }
}

const SMALL_GEMM: usize = 2048;

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, bounds-checked.
///
/// Tiny products go through a plain loop; the blocked kernel has a fixed
/// per-call cost that dominates below a few thousand multiply-adds.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.last_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || lb.last_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.last_index(m, n) < c.len(), "gemm: output out of bounds");
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a[la.offset + i * la.rs + p * la.cs] * b[lb.offset + p * lb.rs + j * lb.cs];
                }
                let ci = lc.offset + i * lc.rs + j * lc.cs;
                c[ci] = if beta == T::zero() { alpha * acc } else { alpha * acc + beta * c[ci] };
            }
        }
        return;
    }
    // SAFETY: all three index ranges were bounds-checked above and `c` is a
    // unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
