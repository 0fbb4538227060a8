//! Image quality metrics.

use crate::error::{input_err, Result};
use crate::tasks::image::Image;

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return input_err(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        ));
    }
    Ok(())
}

/// Mean squared error over all channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    if a.data.is_empty() {
        return input_err("empty image");
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(peak^2 / mse)`; [`PSNR_IDENTICAL`] when the images match exactly.
pub fn psnr(pred: &Image, gt: &Image, peak: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn luminance(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode Gaussian filter.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM of the luminance channels (11x11 Gaussian window, sigma 1.5, peak 1).
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_shapes(pred, gt)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return input_err(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            pred.width, pred.height
        ));
    }
    let (w, h) = (pred.width, pred.height);
    let x = luminance(pred);
    let y = luminance(gt);
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&xx, w, h, &k);
    let syy = filter_valid(&yy, w, h, &k);
    let sxy = filter_valid(&xy, w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let va = sxx[i] - a * a;
            let vb = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: usize, h: usize) -> Image {
        let mut data = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let v = if (r / 3 + c / 3) % 2 == 0 { 0.9 } else { 0.1 };
                data.extend([v, v * 0.5, 1.0 - v]);
            }
        }
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_IDENTICAL);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let c = Image::filled(4, 4, [0.51; 3]);
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-3);
        assert!(psnr(&a, &Image::filled(4, 5, [0.5; 3]), 1.0).is_err());
    }

    #[test]
    fn psnr_is_consistent_with_mse() {
        let a = checker(16, 16);
        let b = Image::filled(16, 16, [0.4; 3]);
        let m = mse(&a, &b).unwrap();
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 10.0 * (1.0 / m).log10());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = checker(24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_negative_is_below_one() {
        let a = checker(24, 20);
        let neg = Image::new(24, 20, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 1.0);
    }

    #[test]
    fn ssim_of_constants_is_luminance_term() {
        let (a, b) = (0.2f64, 0.7f64);
        let ia = Image::filled(16, 16, [a as f32; 3]);
        let ib = Image::filled(16, 16, [b as f32; 3]);
        // luminance of a gray pixel is the gray value itself (weights sum to 1)
        let la = 0.299 * (a as f32) as f64 + 0.587 * (a as f32) as f64 + 0.114 * (a as f32) as f64;
        let lb = 0.299 * (b as f32) as f64 + 0.587 * (b as f32) as f64 + 0.114 * (b as f32) as f64;
        let c1 = 1e-4;
        let want = (2.0 * la * lb + c1) / (la * la + lb * lb + c1);
        assert!((ssim(&ia, &ib).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::filled(10, 30, [0.0; 3]);
        assert!(ssim(&a, &a).is_err());
    }
}
