use crate::error::{Error, Result};
use crate::image::Image;

/// Spatial frequency and average gradient on the 255 scale.
pub fn sf_ag(x: &Image) -> Result<(f64, f64)> {
    if !x.is_gray() {
        return Err(Error::Image("sf_ag needs a gray image".into()));
    }
    let (h, w) = x.dims();
    if h < 2 || w < 2 {
        return Err(Error::Image(format!("sf_ag needs at least 2×2, got {h}×{w}")));
    }
    let p = |r: usize, c: usize| x.data()[r * w + c] * 255.0;
    let mut rf = 0.0;
    for r in 0..h {
        for c in 1..w {
            rf += (p(r, c) - p(r, c - 1)).powi(2);
        }
    }
    let mut cf = 0.0;
    for r in 1..h {
        for c in 0..w {
            cf += (p(r, c) - p(r - 1, c)).powi(2);
        }
    }
    let rf = rf / (h * (w - 1)) as f64;
    let cf = cf / ((h - 1) * w) as f64;
    let mut ag = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let dx = p(r, c + 1) - p(r, c);
            let dy = p(r + 1, c) - p(r, c);
            ag += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(((rf + cf).sqrt(), ag / ((h - 1) * (w - 1)) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_checkerboard() {
        assert_eq!(sf_ag(&Image::constant(5, 6, 0.4)).unwrap(), (0.0, 0.0));
        let cb = Image::gray_from_fn(2, 2, |r, c| ((r + c) % 2) as f64);
        let (sf, _) = sf_ag(&cb).unwrap();
        assert!((sf - 255.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!(sf_ag(&Image::constant(1, 4, 0.0)).is_err());
    }
}
