use crate::error::{Error, Result};
use crate::image::{bin256, histogram_counts, Image};

fn entropy_of_counts(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    let mut h = 0.0;
    for c in counts.filter(|&c| c > 0) {
        let p = c as f64 / n;
        h -= p * p.log2();
    }
    h
}

/// Shannon entropy in bits of the 256-bin histogram.
pub fn entropy(x: &Image) -> Result<f64> {
    let counts = histogram_counts(x)?;
    Ok(entropy_of_counts(counts.into_iter(), x.numel() as f64))
}

/// Joint 256×256 histogram counts, row index from `a`.
pub fn joint_counts(a: &Image, b: &Image) -> Result<Vec<u64>> {
    if !a.is_gray() || !b.is_gray() {
        return Err(Error::Image("mutual information needs gray images".into()));
    }
    a.same_dims(b)?;
    let mut joint = vec![0u64; 256 * 256];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        joint[bin256(x) * 256 + bin256(y)] += 1;
    }
    Ok(joint)
}

/// `H(a) + H(b) - H(a, b)` in bits. Identical inputs give exactly `H(a)`.
pub fn mutual_information(a: &Image, b: &Image) -> Result<f64> {
    let joint = joint_counts(a, b)?;
    let n = a.numel() as f64;
    let ha = entropy(a)?;
    let hb = entropy(b)?;
    let hab = entropy_of_counts(joint.into_iter(), n);
    Ok(((ha + hb) - hab).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&Image::constant(4, 4, 0.3)).unwrap(), 0.0);
        let half = Image::gray_from_fn(4, 4, |r, _| if r < 2 { 0.0 } else { 1.0 });
        assert_eq!(entropy(&half).unwrap(), 1.0);
        let all = Image::gray_from_fn(16, 16, |r, c| (r * 16 + c) as f64 / 255.0);
        assert!((entropy(&all).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn mi_cases() {
        let x = Image::gray_from_fn(8, 8, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        assert_eq!(mutual_information(&x, &x).unwrap(), entropy(&x).unwrap());
        assert_eq!(mutual_information(&x, &Image::constant(8, 8, 0.5)).unwrap(), 0.0);
        assert!(mutual_information(&x, &Image::constant(8, 7, 0.5)).is_err());
    }
}
