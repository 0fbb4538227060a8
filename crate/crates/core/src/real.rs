//! Scalar abstraction over the two working precisions.
//!
//! Training runs in `f32`. Gradient-check suites instantiate the same model in
//! `f64`, where central finite differences are meaningful.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides (row-major `m x k` times `k x n`).
    ///
    /// # Safety
    /// Strides and dimensions must describe in-bounds views of the slices.
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

    /// Elementwise `sin` and `cos` of `input`.
    fn sin_cos_slice(input: &[Self], sin: &mut [Self], cos: &mut [Self]);

    /// Replaces `values` by their sines and writes the cosines to `cos`.
    fn sin_cos_in_place(values: &mut [Self], cos: &mut [Self]);

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
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

    fn sin_cos_slice(input: &[f64], sin: &mut [f64], cos: &mut [f64]) {
        for ((x, s), c) in input.iter().zip(sin.iter_mut()).zip(cos.iter_mut()) {
            let (sx, cx) = x.sin_cos();
            *s = sx;
            *c = cx;
        }
    }

    fn sin_cos_in_place(values: &mut [f64], cos: &mut [f64]) {
        for (x, c) in values.iter_mut().zip(cos.iter_mut()) {
            let (sx, cx) = x.sin_cos();
            *x = sx;
            *c = cx;
        }
    }
}

impl Real for f32 {
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

    fn sin_cos_slice(input: &[f32], sin: &mut [f32], cos: &mut [f32]) {
        if within_fast_range(input) {
            fast_sin_cos_f32(input, sin, cos);
        } else {
            for ((x, s), c) in input.iter().zip(sin.iter_mut()).zip(cos.iter_mut()) {
                let (sx, cx) = x.sin_cos();
                *s = sx;
                *c = cx;
            }
        }
    }

    fn sin_cos_in_place(values: &mut [f32], cos: &mut [f32]) {
        if within_fast_range(values) {
            fast_sin_cos_in_place_f32(values, cos);
        } else {
            for (x, c) in values.iter_mut().zip(cos.iter_mut()) {
                let (sx, cx) = x.sin_cos();
                *x = sx;
                *c = cx;
            }
        }
    }
}

// Above this magnitude the nearest-multiple rounding trick and the split-pi
// reduction both lose accuracy.
const FAST_TRIG_LIMIT: f32 = 1.0e5;

// Non-short-circuiting so the scan vectorizes; NaN counts as in range and
// propagates through the fast path.
fn within_fast_range(xs: &[f32]) -> bool {
    !xs.iter().fold(false, |big, x| big | (x.abs() > FAST_TRIG_LIMIT))
}

/// Branch-free `sin`/`cos` for `f32` slices that the compiler can vectorize.
///
/// Reduces `x = k*pi + r` with `|r| <= pi/2` and evaluates Taylor polynomials
/// (degree 11 for sine, 12 for cosine). Absolute error stays within a few
/// `f32` ulps of 1 for `|x| <= 1e5`.
pub fn fast_sin_cos_f32(input: &[f32], sin: &mut [f32], cos: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if simd::available() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { simd::sin_cos_slices(input, sin, cos) };
        return;
    }
    sin_cos_slices(input, sin, cos);
}

fn fast_sin_cos_in_place_f32(values: &mut [f32], cos: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if simd::available() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { simd::sin_cos_in_place(values, cos) };
        return;
    }
    sin_cos_in_place(values, cos);
}

#[inline(always)]
fn sin_cos_slices(input: &[f32], sin: &mut [f32], cos: &mut [f32]) {
    let n = input.len().min(sin.len()).min(cos.len());
    let (input, sin, cos) = (&input[..n], &mut sin[..n], &mut cos[..n]);
    for i in 0..n {
        let (s, c) = fast_sin_cos_one(input[i]);
        sin[i] = s;
        cos[i] = c;
    }
}

#[inline(always)]
fn sin_cos_in_place(values: &mut [f32], cos: &mut [f32]) {
    let n = values.len().min(cos.len());
    let (values, cos) = (&mut values[..n], &mut cos[..n]);
    for i in 0..n {
        let (s, c) = fast_sin_cos_one(values[i]);
        values[i] = s;
        cos[i] = c;
    }
}

// Same scalar kernel compiled with wider vectors. No floating-point
// contraction happens, so results are bit-identical to the portable path.
#[cfg(target_arch = "x86_64")]
mod simd {
    use std::sync::OnceLock;

    pub(super) fn available() -> bool {
        static AVAILABLE: OnceLock<bool> = OnceLock::new();
        *AVAILABLE.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn sin_cos_slices(input: &[f32], sin: &mut [f32], cos: &mut [f32]) {
        super::sin_cos_slices(input, sin, cos)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn sin_cos_in_place(values: &mut [f32], cos: &mut [f32]) {
        super::sin_cos_in_place(values, cos)
    }
}

#[inline(always)]
fn fast_sin_cos_one(x: f32) -> (f32, f32) {
    const INV_PI: f32 = std::f32::consts::FRAC_1_PI;
    const ROUND_MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
    const PI_A: f32 = 3.140625;
    const PI_B: f32 = 9.675_026e-4;
    const PI_C: f32 = 1.509_958e-7;

    const S3: f32 = -1.0 / 6.0;
    const S5: f32 = 1.0 / 120.0;
    const S7: f32 = -1.0 / 5040.0;
    const S9: f32 = 1.0 / 362_880.0;
    const S11: f32 = -1.0 / 39_916_800.0;

    const C2: f32 = -0.5;
    const C4: f32 = 1.0 / 24.0;
    const C6: f32 = -1.0 / 720.0;
    const C8: f32 = 1.0 / 40_320.0;
    const C10: f32 = -1.0 / 3_628_800.0;
    const C12: f32 = 1.0 / 479_001_600.0;

    let shifted = x * INV_PI + ROUND_MAGIC;
    let parity = shifted.to_bits() << 31;
    let k = shifted - ROUND_MAGIC;
    let r = ((x - k * PI_A) - k * PI_B) - k * PI_C;
    let r2 = r * r;
    let s = r + r * r2 * (S3 + r2 * (S5 + r2 * (S7 + r2 * (S9 + r2 * S11))));
    let c = 1.0 + r2 * (C2 + r2 * (C4 + r2 * (C6 + r2 * (C8 + r2 * (C10 + r2 * C12)))));
    (
        f32::from_bits(s.to_bits() ^ parity).clamp(-1.0, 1.0),
        f32::from_bits(c.to_bits() ^ parity).clamp(-1.0, 1.0),
    )
}

/// Dot product with eight independent partial sums, in a fixed order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense row-major matrix; rows are batch items for activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self::from_vec(rows.len(), self.cols, data)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
