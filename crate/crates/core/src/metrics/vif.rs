use super::filter::{filter_sep, Border};
use crate::error::{Error, Result};
use crate::image::{gaussian_taps, Image};

pub const VIF_SIGMA_NSQ: f64 = 2.0;
pub const VIF_SCALES: usize = 4;
const EPS: f64 = 1e-10;

/// Pixel-domain multiscale VIF of `dist` against `reference`, both on the
/// 255 scale internally. Scale `s = 1..4` uses a Gaussian of side
/// `2^(5-s) + 1` and σ = side/5; coarser scales low-pass then decimate by 2.
/// Scales whose reference carries no information are skipped.
pub fn vif(dist: &Image, reference: &Image) -> Result<f64> {
    if !dist.is_gray() || !reference.is_gray() {
        return Err(Error::Image("vif needs gray images".into()));
    }
    dist.same_dims(reference)?;
    let (mut h, mut w) = dist.dims();
    let mut r: Vec<f64> = reference.data().iter().map(|v| v * 255.0).collect();
    let mut d: Vec<f64> = dist.data().iter().map(|v| v * 255.0).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=VIF_SCALES {
        let n = (1usize << (VIF_SCALES + 1 - scale)) + 1;
        let taps = gaussian_taps(n as f64 / 5.0, n / 2);
        let f = |x: &[f64], h: usize, w: usize| filter_sep(x, h, w, &taps, Border::Replicate).0;
        if scale > 1 {
            if h < 2 || w < 2 {
                break;
            }
            let (rl, dl) = (f(&r, h, w), f(&d, h, w));
            let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
            let pick = |x: &[f64]| {
                let mut out = Vec::with_capacity(nh * nw);
                for row in (0..h).step_by(2) {
                    for col in (0..w).step_by(2) {
                        out.push(x[row * w + col]);
                    }
                }
                out
            };
            r = pick(&rl);
            d = pick(&dl);
            h = nh;
            w = nw;
        }
        let rr: Vec<f64> = r.iter().map(|v| v * v).collect();
        let dd: Vec<f64> = d.iter().map(|v| v * v).collect();
        let rd: Vec<f64> = r.iter().zip(&d).map(|(a, b)| a * b).collect();
        let (mu1, mu2) = (f(&r, h, w), f(&d, h, w));
        let (e11, e22, e12) = (f(&rr, h, w), f(&dd, h, w), f(&rd, h, w));
        let (mut sn, mut sd) = (0.0, 0.0);
        for k in 0..h * w {
            let mut s1 = (e11[k] - mu1[k] * mu1[k]).max(0.0);
            let s2 = (e22[k] - mu2[k] * mu2[k]).max(0.0);
            let s12 = e12[k] - mu1[k] * mu2[k];
            let mut g = s12 / (s1 + EPS);
            let mut sv = s2 - g * s12;
            if s1 < EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            if sv <= EPS {
                sv = EPS;
            }
            sn += (1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ)).log10();
            sd += (1.0 + s1 / VIF_SIGMA_NSQ).log10();
        }
        if sd > 0.0 {
            num += sn;
            den += sd;
        }
    }
    if den == 0.0 {
        return Ok(if dist == reference { 1.0 } else { 0.0 });
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::gaussian_blur;

    #[test]
    fn self_and_blur() {
        let x = Image::gray_from_fn(32, 32, |r, c| 0.5 + 0.45 * ((r as f64 * 0.8).sin() * (c as f64 * 1.3).cos()));
        assert!((vif(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let b = gaussian_blur(&x.plane_tensor(0), 1.5).unwrap();
        let blurred = Image::gray(32, 32, b.into_data()).unwrap();
        assert!(vif(&blurred, &x).unwrap() < 1.0);
        let c = Image::constant(8, 8, 0.2);
        assert_eq!(vif(&c, &c).unwrap(), 1.0);
    }
}
