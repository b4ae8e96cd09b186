//! Image quality metrics on `[0, 1]` images.

use crate::imageio::{ImageError, RgbImage};

use super::EvalError;

/// Returned for images that are equal to within `1e-10` mean squared error.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64, ImageError> {
    a.same_size(b)?;
    let n = a.pixels.len() * 3;
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] as f64 - q[k] as f64).powi(2)))
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in dB for peak value 1.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, ImageError> {
    psnr_with_peak(a, b, 1.0)
}

pub fn psnr_with_peak(a: &RgbImage, b: &RgbImage, peak: f64) -> Result<f64, ImageError> {
    let e = mse(a, b)?;
    if e < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP_DB))
}

/// Window and stabilising constants for SSIM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalised 1-D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let taps: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / s).collect()
    }
}

/// Separable "valid" filtering of a row-major `w × h` plane.
fn filter_valid(data: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma channels over all windows that
/// fit inside the image.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, EvalError> {
    ssim_with(a, b, &SsimParams::default())
}

pub fn ssim_with(a: &RgbImage, b: &RgbImage, p: &SsimParams) -> Result<f64, EvalError> {
    a.same_size(b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < p.window || h < p.window {
        return Err(EvalError::TooSmall {
            width: a.width,
            height: a.height,
            window: p.window,
        });
    }
    let la = a.luma();
    let lb = b.luma();
    let k = p.kernel();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(&la, w, h, &k);
    let mu_b = filter_valid(&lb, w, h, &k);
    let aa = filter_valid(&prod(&la, &la), w, h, &k);
    let bb = filter_valid(&prod(&lb, &lb), w, h, &k);
    let ab = filter_valid(&prod(&la, &lb), w, h, &k);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}
