//! Radix-2 two-dimensional FFT.
//!
//! Spectra follow `F(u,v) = sum_x sum_y I(x,y) e^{-2πi ux/H} e^{-2πi vy/W}`.
//! Inputs whose extents are not powers of two are zero-padded at the bottom
//! and right, so the returned spectrum lives on the padded grid.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::{CTensor, Tensor};

/// In-place iterative radix-2 transform. `data.len()` must be a power of two.
/// The inverse direction is unnormalized.
pub fn fft_inplace(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            data.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = Complex64::from_polar(1.0, step * k as f64);
                let a = data[start + k];
                let b = data[start + k + half] * w;
                data[start + k] = a + b;
                data[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        _ => Err(Error::InvalidShape { op, msg: format!("expected an H×W tensor, got {shape:?}") }),
    }
}

/// Padded extents used by [`fft2`] for an `h × w` input.
pub fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.next_power_of_two(), w.next_power_of_two())
}

fn transpose(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = data[r * w + c];
        }
    }
    out
}

fn rows_then_cols(data: &mut Vec<Complex64>, h: usize, w: usize, exec: Exec, row_fn: &(dyn Fn(&mut [Complex64]) + Sync)) {
    par::for_each_chunk(exec, data, w, |_, row| row_fn(row));
    let mut t = transpose(data, h, w);
    par::for_each_chunk(exec, &mut t, h, |_, col| row_fn(col));
    *data = transpose(&t, w, h);
}

fn transform_pow2(x: &CTensor, inverse: bool, exec: Exec) -> Result<CTensor> {
    let (h, w) = dims2(x.shape(), "fft2")?;
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::InvalidShape { op: "fft2", msg: format!("{h}×{w} is not a power-of-two grid") });
    }
    let mut data = x.data().to_vec();
    rows_then_cols(&mut data, h, w, exec, &|row| fft_inplace(row, inverse));
    CTensor::new(vec![h, w], data)
}

/// Forward 2-D FFT of a real image, zero-padded to the next power of two.
pub fn fft2(img: &Tensor) -> Result<CTensor> {
    fft2_with(img, Exec::Parallel)
}

pub fn fft2_with(img: &Tensor, exec: Exec) -> Result<CTensor> {
    let (h, w) = dims2(img.shape(), "fft2")?;
    img.ensure_finite("fft2 input")?;
    let (hp, wp) = padded_dims(h, w);
    let mut data = vec![Complex64::new(0.0, 0.0); hp * wp];
    for r in 0..h {
        for c in 0..w {
            data[r * wp + c] = Complex64::new(img.data()[r * w + c], 0.0);
        }
    }
    transform_pow2(&CTensor::new(vec![hp, wp], data)?, false, exec)
}

/// Forward transform of a complex power-of-two grid.
pub fn fft2_complex(x: &CTensor) -> Result<CTensor> {
    transform_pow2(x, false, Exec::Parallel)
}

/// Unnormalized inverse transform; this is the adjoint (conjugate
/// transpose) of the forward DFT.
pub fn fft2_adjoint(spec: &CTensor) -> Result<CTensor> {
    transform_pow2(spec, true, Exec::Parallel)
}

/// Normalized inverse transform, `ifft2(fft2(x)) == x`.
pub fn ifft2(spec: &CTensor) -> Result<CTensor> {
    let mut out = fft2_adjoint(spec)?;
    let n = out.numel() as f64;
    out.data_mut().iter_mut().for_each(|z| *z /= n);
    Ok(out)
}

/// Inverse transform followed by cropping back to `h × w` and taking the
/// real part.
pub fn ifft2_real(spec: &CTensor, h: usize, w: usize) -> Result<Tensor> {
    let full = ifft2(spec)?;
    let (hp, wp) = dims2(full.shape(), "ifft2_real")?;
    if h > hp || w > wp {
        return Err(Error::InvalidShape { op: "ifft2_real", msg: format!("crop {h}×{w} exceeds {hp}×{wp}") });
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(full.data()[r * wp + c].re);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Separable direct DFT for arbitrary extents. Uses the radix-2 path when
/// both extents are powers of two.
pub fn dft2_any(x: &CTensor, inverse: bool) -> Result<CTensor> {
    let (h, w) = dims2(x.shape(), "dft2_any")?;
    if h.is_power_of_two() && w.is_power_of_two() {
        return transform_pow2(x, inverse, Exec::Parallel);
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let dft_line = move |line: &mut [Complex64]| {
        let n = line.len();
        if n.is_power_of_two() {
            fft_inplace(line, inverse);
            return;
        }
        let twiddle: Vec<Complex64> = (0..n).map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64)).collect();
        let input = line.to_vec();
        for (k, out) in line.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &v) in input.iter().enumerate() {
                acc += v * twiddle[(k * j) % n];
            }
            *out = acc;
        }
    };
    let mut data = x.data().to_vec();
    rows_then_cols(&mut data, h, w, Exec::Parallel, &dft_line);
    CTensor::new(vec![h, w], data)
}

/// Circularly shifts by `(h/2, w/2)`, moving the DC bin to the center.
pub fn fftshift_slice<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let (sh, sw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let src_r = (r + h - sh) % h;
        for c in 0..w {
            let src_c = (c + w - sw) % w;
            out.push(data[src_r * w + src_c]);
        }
    }
    out
}

fn check_even(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    let (h, w) = dims2(shape, op)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape { op, msg: format!("fftshift needs even extents, got {h}×{w}") });
    }
    Ok((h, w))
}

pub fn fftshift(spec: &CTensor) -> Result<CTensor> {
    let (h, w) = check_even(spec.shape(), "fftshift")?;
    CTensor::new(vec![h, w], fftshift_slice(spec.data(), h, w))
}

/// [`fftshift`] for real-valued grids such as magnitude spectra.
pub fn fftshift_real(x: &Tensor) -> Result<Tensor> {
    let (h, w) = check_even(x.shape(), "fftshift")?;
    Tensor::new(vec![h, w], fftshift_slice(x.data(), h, w))
}
