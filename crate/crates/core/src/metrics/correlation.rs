use crate::error::{Error, Result};
use crate::image::Image;

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn check(f: &Image, i: &Image, v: &Image) -> Result<()> {
    if !f.is_gray() || !i.is_gray() || !v.is_gray() {
        return Err(Error::Image("correlation metrics need gray images".into()));
    }
    f.same_dims(i)?;
    f.same_dims(v)
}

/// `corr(f, i)` and `corr(f, v)`.
pub fn cc_pair(f: &Image, i: &Image, v: &Image) -> Result<(f64, f64)> {
    check(f, i, v)?;
    Ok((pearson(f.data(), i.data()), pearson(f.data(), v.data())))
}

/// `(scd, cc)` with `scd = corr(f - v, i) + corr(f - i, v)`.
pub fn scd_cc(f: &Image, i: &Image, v: &Image) -> Result<(f64, f64)> {
    let (ci, cv) = cc_pair(f, i, v)?;
    let dv: Vec<f64> = f.data().iter().zip(v.data()).map(|(a, b)| a - b).collect();
    let di: Vec<f64> = f.data().iter().zip(i.data()).map(|(a, b)| a - b).collect();
    let scd = pearson(&dv, i.data()) + pearson(&di, v.data());
    Ok((scd, (ci + cv) / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_and_invariant() {
        let x = Image::gray_from_fn(6, 6, |r, c| ((r * 5 + c * 2) % 7) as f64 / 7.0);
        let (scd, cc) = scd_cc(&x, &x, &x).unwrap();
        assert_eq!((scd, cc), (0.0, 1.0));
        let i = Image::gray_from_fn(6, 6, |r, c| ((r + 3 * c) % 5) as f64 / 5.0);
        let g = Image::gray_from_fn(6, 6, |r, c| 0.1 + 0.5 * x.get(0, r, c));
        let a = scd_cc(&x, &i, &x).unwrap().1;
        let b = scd_cc(&g, &i, &x).unwrap().1;
        assert!((a - b).abs() < 1e-9);
    }
}
