//! Trainable Fourier-feature encoding of interpolated grid features.
//!
//! Each level owns a frequency matrix `B` (`width x features`) and maps a grid
//! feature `v` to `sin(2*pi * B v)`. Frequencies start Gaussian with a standard
//! deviation that grows geometrically with the level index, so finer grids are
//! biased toward higher frequencies.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};
use crate::real::{axpy, dot, Matrix, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct FourierLayer<T> {
    /// `width x features`; row `j` produces output component `j`.
    pub freq: Matrix<T>,
    pub sigma: f64,
    pub level: usize,
}

/// Standard deviation of level `level`: `sigma_min * c_f^level`.
pub fn level_sigma(level: usize, sigma_min: f64, c_f: f64) -> f64 {
    sigma_min * c_f.powi(level as i32)
}

pub fn init_fourier<T: Real, R: Rng + ?Sized>(
    level: usize,
    width: usize,
    features: usize,
    sigma_min: f64,
    c_f: f64,
    rng: &mut R,
) -> Result<FourierLayer<T>> {
    if width == 0 || features == 0 {
        return config_err("Fourier layer needs width and features >= 1");
    }
    if !(sigma_min > 0.0) || !sigma_min.is_finite() {
        return config_err(format!("sigma_min must be positive, got {sigma_min}"));
    }
    if !(c_f >= 1.0) || !c_f.is_finite() {
        return config_err(format!("c_f must be >= 1, got {c_f}"));
    }
    let sigma = level_sigma(level, sigma_min, c_f);
    let normal = Normal::new(0.0, sigma).map_err(|e| crate::NffbError::Config(e.to_string()))?;
    let data = (0..width * features).map(|_| T::of(normal.sample(rng))).collect();
    Ok(FourierLayer {
        freq: Matrix::from_vec(width, features, data),
        sigma,
        level,
    })
}

/// `gamma_j = sin(2*pi * <B_j, v>)` for a single feature vector.
pub fn fourier_encode<T: Real>(v: &[T], freq: &Matrix<T>) -> Vec<T> {
    let input = Matrix::from_vec(1, v.len(), v.to_vec());
    encode_batch(&input, &freq.data, freq.rows, None).0.data
}

/// Gradients of `<upstream, gamma(v)>` with respect to `v` and `B`.
pub fn fourier_backward<T: Real>(v: &[T], freq: &Matrix<T>, upstream: &[T]) -> (Vec<T>, Matrix<T>) {
    let input = Matrix::from_vec(1, v.len(), v.to_vec());
    let (_, cos) = encode_batch(&input, &freq.data, freq.rows, None);
    let up = Matrix::from_vec(1, upstream.len(), upstream.to_vec());
    let mut dv = Matrix::zeros(1, v.len());
    let mut dfreq = Matrix::zeros(freq.rows, freq.cols);
    backward_batch(&input, &freq.data, &cos, &up, &mut dv, &mut dfreq.data);
    (dv.data, dfreq)
}

fn transpose<T: Real>(freq: &[T], width: usize, features: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); width * features];
    for j in 0..width {
        for f in 0..features {
            bt[f * width + j] = freq[j * features + f];
        }
    }
    bt
}

/// Batched encoding, optionally added onto `base`.
///
/// Returns the outputs and `cos(phase)` for the backward pass. Rows are
/// processed independently so each stays in cache.
pub(crate) fn encode_batch<T: Real>(
    v: &Matrix<T>,
    freq: &[T],
    width: usize,
    base: Option<&Matrix<T>>,
) -> (Matrix<T>, Vec<T>) {
    let (batch, features) = (v.rows, v.cols);
    debug_assert_eq!(freq.len(), width * features);
    let bt = transpose(freq, width, features);
    let two_pi = T::of(std::f64::consts::TAU);
    let mut out = Matrix::zeros(batch, width);
    let mut cos = vec![T::zero(); batch * width];
    for r in 0..batch {
        let row = out.row_mut(r);
        for (f, &vf) in v.row(r).iter().enumerate() {
            axpy(two_pi * vf, &bt[f * width..(f + 1) * width], row);
        }
        T::sin_cos_in_place(row, &mut cos[r * width..(r + 1) * width]);
        if let Some(b) = base {
            for (o, &x) in row.iter_mut().zip(b.row(r)) {
                *o += x;
            }
        }
    }
    (out, cos)
}

/// Accumulates `dv` and `dfreq` for the upstream gradient of a batched encoding.
pub(crate) fn backward_batch<T: Real>(
    v: &Matrix<T>,
    freq: &[T],
    cos: &[T],
    upstream: &Matrix<T>,
    dv: &mut Matrix<T>,
    dfreq: &mut [T],
) {
    let (batch, features, width) = (v.rows, v.cols, upstream.cols);
    let bt = transpose(freq, width, features);
    let mut dbt = vec![T::zero(); width * features];
    let two_pi = T::of(std::f64::consts::TAU);
    let mut t = vec![T::zero(); width];
    for r in 0..batch {
        for ((ti, &u), &c) in t.iter_mut().zip(upstream.row(r)).zip(&cos[r * width..(r + 1) * width]) {
            *ti = two_pi * u * c;
        }
        let vr = v.row(r);
        let dvr = dv.row_mut(r);
        for f in 0..features {
            dvr[f] += dot(&t, &bt[f * width..(f + 1) * width]);
            axpy(vr[f], &t, &mut dbt[f * width..(f + 1) * width]);
        }
    }
    for j in 0..width {
        for f in 0..features {
            dfreq[j * features + f] += dbt[f * width + j];
        }
    }
}
