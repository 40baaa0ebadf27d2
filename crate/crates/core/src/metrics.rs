//! PSNR and SSIM evaluation metrics.

use crate::error::{DenasError, Result};
use crate::tensor::TensorData;

/// Sentinel reported for identical images (MSE = 0).
pub const PSNR_SENTINEL: f64 = 99.0;

/// Peak signal-to-noise ratio in dB, capped at the sentinel.
pub fn psnr(a: &TensorData, b: &TensorData, data_range: f64) -> Result<f64> {
    if a.shape != b.shape {
        return Err(DenasError::shape(
            "psnr",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_SENTINEL))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM with the standard 11x11 Gaussian window (sigma 1.5),
/// valid-window positions only, averaged over batch and channels.
pub fn ssim(a: &TensorData, b: &TensorData, data_range: f64) -> Result<f64> {
    if a.shape != b.shape {
        return Err(DenasError::shape(
            "ssim",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let [n, c, h, w] = a.shape;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DenasError::arg(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for y0 in 0..=(h - SSIM_WINDOW) {
                for x0 in 0..=(w - SSIM_WINDOW) {
                    let (mut mu_a, mut mu_b) = (0.0, 0.0);
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let g = win[dy * SSIM_WINDOW + dx];
                            mu_a += g * a.at(ni, ci, y0 + dy, x0 + dx);
                            mu_b += g * b.at(ni, ci, y0 + dy, x0 + dx);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let g = win[dy * SSIM_WINDOW + dx];
                            let da = a.at(ni, ci, y0 + dy, x0 + dx) - mu_a;
                            let db = b.at(ni, ci, y0 + dy, x0 + dx) - mu_b;
                            va += g * da * da;
                            vb += g * db * db;
                            cov += g * da * db;
                        }
                    }
                    let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}
