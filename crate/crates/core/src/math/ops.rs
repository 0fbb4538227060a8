//! Single-sample reference forms of the tape primitives.

use crate::error::{config_err, input_err, Result};
use crate::real::{Matrix, Real};

/// `W x + b` with `W` stored `n_out x n_in`.
pub fn affine<T: Real>(x: &[T], w: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    if w.cols != x.len() || w.rows != b.len() {
        return config_err(format!(
            "affine: W is {}x{}, x has {} entries, b has {}",
            w.rows,
            w.cols,
            x.len(),
            b.len()
        ));
    }
    Ok((0..w.rows)
        .map(|r| w.row(r).iter().zip(x).fold(b[r], |acc, (&wi, &xi)| acc + wi * xi))
        .collect())
}

pub fn sine_act<T: Real>(z: &[T], alpha: T) -> Vec<T> {
    z.iter().map(|&v| (alpha * v).sin()).collect()
}

/// Batch mean of squared L2 distances; rows are samples.
pub fn mse_loss<T: Real>(y: &[Vec<T>], y_gt: &[Vec<T>]) -> Result<T> {
    if y.is_empty() {
        return input_err("loss over an empty batch");
    }
    if y.len() != y_gt.len() || y.iter().zip(y_gt).any(|(a, b)| a.len() != b.len()) {
        return config_err("loss: prediction and target shapes differ");
    }
    let total: T = y
        .iter()
        .zip(y_gt)
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>())
        .sum();
    Ok(total / T::of(y.len() as f64))
}

/// Batch mean of `(y - y_gt)^2 / (eps + y_gt^2)`.
pub fn mape_sq_loss<T: Real>(y: &[T], y_gt: &[T], eps: T) -> Result<T> {
    if !(eps > T::zero()) {
        return config_err(format!("MAPE epsilon must be positive, got {eps}"));
    }
    if y.is_empty() {
        return input_err("loss over an empty batch");
    }
    if y.len() != y_gt.len() {
        return config_err("loss: prediction and target lengths differ");
    }
    let total: T = y
        .iter()
        .zip(y_gt)
        .map(|(&p, &t)| (p - t) * (p - t) / (eps + t * t))
        .sum();
    Ok(total / T::of(y.len() as f64))
}
