use super::filter::{filter_sep, Border};
use crate::error::{Error, Result};
use crate::image::{gaussian_taps, Image};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

/// Window side for an `h × w` image: 11, or the largest odd size that fits.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h.min(w));
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// 1-D taps of the SSIM window for an `h × w` image.
pub fn ssim_taps(h: usize, w: usize) -> Vec<f64> {
    gaussian_taps(SSIM_SIGMA, ssim_window_size(h, w) / 2)
}

fn gray_pair(a: &Image, b: &Image, op: &str) -> Result<()> {
    if !a.is_gray() || !b.is_gray() {
        return Err(Error::Image(format!("{op} needs gray images")));
    }
    a.same_dims(b)
}

/// Mean SSIM over valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    gray_pair(a, b, "ssim")?;
    let (h, w) = a.dims();
    let taps = ssim_taps(h, w);
    let f = |x: &[f64]| filter_sep(x, h, w, &taps, Border::Valid).0;
    let x = a.data();
    let y = b.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let (mx, my, sxx, syy, sxy) = (f(x), f(y), f(&xx), f(&yy), f(&xy));
    let n = mx.len();
    let mut total = 0.0;
    for k in 0..n {
        let (ux, uy) = (mx[k], my[k]);
        let vx = sxx[k] - ux * ux;
        let vy = syy[k] - uy * uy;
        let cxy = sxy[k] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// `10·log10(1 / MSE)` with peak 1, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    gray_pair(a, b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.numel() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn ssim_psnr(a: &Image, b: &Image) -> Result<(f64, f64)> {
    Ok((ssim(a, b)?, psnr(a, b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tex(h: usize, w: usize, k: f64) -> Image {
        Image::gray_from_fn(h, w, |r, c| 0.5 + 0.4 * ((r as f64 * k).sin() * (c as f64 * 0.7).cos()))
    }

    #[test]
    fn identical_inputs() {
        let x = tex(16, 16, 0.9);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
    }

    #[test]
    fn offset_psnr() {
        let x = Image::constant(8, 8, 0.5);
        let y = Image::constant(8, 8, 0.5 + 1.0 / 255.0);
        assert!((psnr(&x, &y).unwrap() - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn symmetric_and_small() {
        let (a, b) = (tex(12, 14, 0.9), tex(12, 14, 0.4));
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert_eq!(ssim_window_size(4, 6), 3);
        assert_eq!(ssim_window_size(32, 32), 11);
        assert!(ssim(&tex(3, 3, 0.3), &tex(3, 3, 0.8)).unwrap().is_finite());
    }
}
