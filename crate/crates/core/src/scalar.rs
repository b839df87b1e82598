//! Floating point element types.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Element type tag, as stored in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Real scalar the whole crate is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c <- alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: strides must address valid
    /// memory for the given extents, `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn erf(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one scalar from exactly `size_of::<Self>()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm(
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

    fn erf(self) -> f32 {
        libm::erf(self as f64) as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm(
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

    fn erf(self) -> f64 {
        libm::erf(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// `sum a[i] * b[i]` with eight interleaved partial sums, combined in a
/// fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// Four dot products `a_r . b_s` sharing their loads.
#[inline]
fn dot2x2<T: Scalar>(a0: &[T], a1: &[T], b0: &[T], b1: &[T]) -> [T; 4] {
    const L: usize = 8;
    let mut acc = [[T::zero(); L]; 4];
    let len = a0.len() - a0.len() % L;
    for p in (0..len).step_by(L) {
        let (x0, x1, y0, y1) = (&a0[p..p + L], &a1[p..p + L], &b0[p..p + L], &b1[p..p + L]);
        for l in 0..L {
            acc[0][l] = acc[0][l] + x0[l] * y0[l];
            acc[1][l] = acc[1][l] + x0[l] * y1[l];
            acc[2][l] = acc[2][l] + x1[l] * y0[l];
            acc[3][l] = acc[3][l] + x1[l] * y1[l];
        }
    }
    let mut out = [T::zero(); 4];
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7]));
    }
    for p in len..a0.len() {
        out[0] = out[0] + a0[p] * b0[p];
        out[1] = out[1] + a0[p] * b1[p];
        out[2] = out[2] + a1[p] * b0[p];
        out[3] = out[3] + a1[p] * b1[p];
    }
    out
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d = *d + alpha * v;
    }
}

/// Column block for the broadcast kernels, sized so a block of `b` stays
/// in cache across the rows of `a`.
const NC: usize = 256;

/// Shortest reduction handed to the packed GEMM; shorter ones use the
/// broadcast kernel below.
const GEMM_MIN_K: usize = 64;

/// Reduction block for the dot-product kernel.
const KC: usize = 512;

/// Row-major `c = a(m x k) * b(k x n)`, or `c += ...` when `accumulate`.
/// With `trans_a` the left operand is stored as `k x m`, with `trans_b` the
/// right one as `n x k`.
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if !trans_b && k >= GEMM_MIN_K {
        let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
        let beta = if accumulate { T::one() } else { T::zero() };
        // SAFETY: slices cover exactly the addressed extents and do not alias.
        unsafe {
            T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), n as isize, 1, beta, c.as_mut_ptr(), n as isize, 1);
        }
        return;
    }
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    let a_at = |i: usize, p: usize| if trans_a { a[p * m + i] } else { a[i * k + p] };
    if trans_b {
        if trans_a {
            for i in 0..m {
                for j in 0..n {
                    let s = (0..k).fold(T::zero(), |s, p| s + a[p * m + i] * b[j * k + p]);
                    c[i * n + j] = c[i * n + j] + s;
                }
            }
            return;
        }
        for p0 in (0..k).step_by(KC) {
            let p1 = (p0 + KC).min(k);
            let row_a = |i: usize| &a[i * k + p0..i * k + p1];
            let row_b = |j: usize| &b[j * k + p0..j * k + p1];
            let (m2, n2) = (m - m % 2, n - n % 2);
            for i in (0..m2).step_by(2) {
                for j in (0..n2).step_by(2) {
                    let [s00, s01, s10, s11] = dot2x2(row_a(i), row_a(i + 1), row_b(j), row_b(j + 1));
                    c[i * n + j] = c[i * n + j] + s00;
                    c[i * n + j + 1] = c[i * n + j + 1] + s01;
                    c[(i + 1) * n + j] = c[(i + 1) * n + j] + s10;
                    c[(i + 1) * n + j + 1] = c[(i + 1) * n + j + 1] + s11;
                }
                for j in n2..n {
                    c[i * n + j] = c[i * n + j] + dot(row_a(i), row_b(j));
                    c[(i + 1) * n + j] = c[(i + 1) * n + j] + dot(row_a(i + 1), row_b(j));
                }
            }
            for i in m2..m {
                for j in 0..n {
                    c[i * n + j] = c[i * n + j] + dot(row_a(i), row_b(j));
                }
            }
        }
        return;
    }
    for j0 in (0..n).step_by(NC) {
        let j1 = (j0 + NC).min(n);
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                axpy(a_at(i, p), &b[p * n + j0..p * n + j1], crow);
            }
        }
    }
}
