//! Chen–Blum contrast-preservation quality.

use super::filter::{filter_sep, Border};
use crate::error::{Error, Result};
use crate::fft::dft2_any;
use crate::image::Image;
use crate::tensor::{CTensor, Tensor};

const F0: f64 = 15.3870;
const F1: f64 = 1.3456;
const A: f64 = 0.7622;
const K: f64 = 1.0;
const H: f64 = 1.0;
const P: i32 = 3;
const Q: i32 = 2;
const Z: f64 = 1e-4;
const KERNEL_RADIUS: usize = 15;

/// Normalized frequency of DFT bin `k` on a centered grid of `n` points.
fn freq(k: usize, n: usize) -> f64 {
    let half = n / 2;
    (((k + half) % n) as f64 - half as f64) * 2.0 / n as f64
}

/// Difference-of-Gaussians contrast sensitivity filtering.
fn csf_filter(x: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let spec = dft2_any(&Tensor::new(vec![h, w], x.to_vec())?.to_complex(), false)?;
    let mut data = spec.data().to_vec();
    for r in 0..h {
        let v = freq(r, h) * h as f64 / 30.0;
        for c in 0..w {
            let u = freq(c, w) * w as f64 / 30.0;
            let rad = (u * u + v * v).sqrt();
            let s = (-(rad / F0).powi(2)).exp() - A * (-(rad / F1).powi(2)).exp();
            data[r * w + c] *= s;
        }
    }
    let back = dft2_any(&CTensor::new(vec![h, w], data)?, true)?;
    let n = (h * w) as f64;
    Ok(back.data().iter().map(|z| z.re / n).collect())
}

fn gauss_taps(sigma: f64) -> Vec<f64> {
    let r = KERNEL_RADIUS as isize;
    (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI).sqrt() / sigma).collect()
}

/// Band-pass contrast `G2σ * x / G4σ * x - 1` after CSF filtering, then
/// the saturating response `k·C^p / (h·C^q + Z)`. Returns `(C, C_p)`.
fn contrast(x: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let filtered = csf_filter(x, h, w)?;
    let (a, _, _) = filter_sep(&filtered, h, w, &gauss_taps(2.0), Border::Replicate);
    let (b, _, _) = filter_sep(&filtered, h, w, &gauss_taps(4.0), Border::Replicate);
    let c: Vec<f64> = a.iter().zip(&b).map(|(&p, &q)| if q == 0.0 { 0.0 } else { (p / q - 1.0).abs() }).collect();
    let cp = c.iter().map(|&v| K * v.powi(P) / (H * v.powi(Q) + Z)).collect();
    Ok((c, cp))
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        1.0
    } else if a <= b {
        a / b
    } else {
        b / a
    }
}

pub fn qcb(f: &Image, i: &Image, v: &Image) -> Result<f64> {
    if !f.is_gray() || !i.is_gray() || !v.is_gray() {
        return Err(Error::Image("qcb needs gray images".into()));
    }
    f.same_dims(i)?;
    f.same_dims(v)?;
    let (h, w) = f.dims();
    let scaled = |img: &Image| img.data().iter().map(|x| x * 255.0).collect::<Vec<_>>();
    let (_, c1p) = contrast(&scaled(i), h, w)?;
    let (_, c2p) = contrast(&scaled(v), h, w)?;
    let (_, cfp) = contrast(&scaled(f), h, w)?;
    let mut total = 0.0;
    for k in 0..h * w {
        let q1 = ratio(c1p[k], cfp[k]);
        let q2 = ratio(c2p[k], cfp[k]);
        let (s1, s2) = (c1p[k] * c1p[k], c2p[k] * c2p[k]);
        let l1 = if s1 + s2 == 0.0 { 0.5 } else { s1 / (s1 + s2) };
        total += l1 * q1 + (1.0 - l1) * q2;
    }
    Ok((total / (h * w) as f64).clamp(0.0, 1.0))
}
