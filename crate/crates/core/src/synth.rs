//! Deterministic synthetic datasets: paired fusion images and the 2-D
//! two-mode mixture.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, Image};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// A thermal, B visible.
    Ivif,
    /// A under-exposed (γ 2.5), B over-exposed (γ 0.4).
    Mef,
    /// A sharp on the left half, B sharp on the right half.
    Mff,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ivif" => Ok(SynthKind::Ivif),
            "mef" => Ok(SynthKind::Mef),
            "mff" => Ok(SynthKind::Mff),
            _ => Err(Error::InvalidArgument(format!("dataset kind must be ivif, mef or mff, got `{s}`"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Ivif => "ivif",
            SynthKind::Mef => "mef",
            SynthKind::Mff => "mff",
        })
    }
}

fn normalize(v: Vec<f64>, lo: f64, hi: f64) -> Vec<f64> {
    let a = v.iter().copied().fold(f64::INFINITY, f64::min);
    let b = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if b > a { b - a } else { 1.0 };
    v.into_iter().map(|x| lo + (hi - lo) * (x - a) / span).collect()
}

/// Oriented sinusoids over a soft-edged rectangle, scaled to `[0.1, 0.9]`.
pub fn texture(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.3..1.0), rng.random_range(1.0..6.0), rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let n = size as f64;
    let (r0, r1) = (rng.random_range(0.1..0.4) * n, rng.random_range(0.6..0.9) * n);
    let (c0, c1) = (rng.random_range(0.1..0.4) * n, rng.random_range(0.6..0.9) * n);
    let mut v = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64, c as f64);
            let mut s = 0.0;
            for &(a, f, th, ph) in &waves {
                s += a * (2.0 * PI * f * (x * th.cos() + y * th.sin()) / n + ph).sin();
            }
            let inside = ((y - r0).min(r1 - y).min(x - c0).min(c1 - x) / 1.5).tanh();
            v.push(s + 1.5 * inside);
        }
    }
    Image::gray(size, size, normalize(v, 0.1, 0.9)).expect("square")
}

fn blur(img: &Image, sigma: f64) -> Image {
    let b = gaussian_blur(&img.plane_tensor(0), sigma).expect("plane");
    Image::gray(img.height(), img.width(), b.into_data()).expect("same size")
}

/// `(thermal, visible)`: Gaussian hot spots on a dark background versus a
/// texture.
pub fn ivif_pair(size: usize, rng: &mut ChaCha8Rng) -> (Image, Image) {
    let visible = texture(size, rng);
    let n = size as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..5))
        .map(|_| {
            (
                rng.random_range(0.15..0.85) * n,
                rng.random_range(0.15..0.85) * n,
                rng.random_range(0.06..0.16) * n,
                rng.random_range(0.6..0.9),
            )
        })
        .collect();
    let soft = blur(&visible, 2.0);
    let thermal = Image::gray_from_fn(size, size, |r, c| {
        let mut t = 0.08;
        for &(br, bc, rad, amp) in &blobs {
            let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
            t += amp * (-d2 / (2.0 * rad * rad)).exp();
        }
        0.85 * t.min(1.0) + 0.15 * soft.get(0, r, c)
    });
    (thermal, visible)
}

pub fn mef_pair(size: usize, rng: &mut ChaCha8Rng) -> (Image, Image) {
    let scene = texture(size, rng);
    let under = Image::gray_from_fn(size, size, |r, c| scene.get(0, r, c).powf(2.5));
    let over = Image::gray_from_fn(size, size, |r, c| scene.get(0, r, c).powf(0.4));
    (under, over)
}

pub const MFF_BLUR_SIGMA: f64 = 2.0;

pub fn mff_pair(size: usize, rng: &mut ChaCha8Rng) -> (Image, Image) {
    let scene = texture(size, rng);
    let soft = blur(&scene, MFF_BLUR_SIGMA);
    let half = size / 2;
    let a = Image::gray_from_fn(size, size, |r, c| if c < half { scene.get(0, r, c) } else { soft.get(0, r, c) });
    let b = Image::gray_from_fn(size, size, |r, c| if c < half { soft.get(0, r, c) } else { scene.get(0, r, c) });
    (a, b)
}

/// One generated pair with its file name.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub name: String,
    pub a: Image,
    pub b: Image,
}

pub fn generate(kind: SynthKind, count: usize, size: usize, seed: u64) -> Result<Vec<SynthPair>> {
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!("size must be a positive multiple of 4, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|k| {
            let (a, b) = match kind {
                SynthKind::Ivif => ivif_pair(size, &mut rng),
                SynthKind::Mef => mef_pair(size, &mut rng),
                SynthKind::Mff => mff_pair(size, &mut rng),
            };
            SynthPair { name: format!("{k:04}.png"), a, b }
        })
        .collect())
}

pub fn textures(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| texture(size, &mut rng)).collect()
}

pub const TOY_MODES: [[f64; 2]; 2] = [[-5.0, -5.0], [5.0, 5.0]];
pub const TOY_SIGMA: f64 = 0.5;

/// `[n, 2]` samples from the equal-weight mixture of `N(m, σ²I)` at the
/// two [`TOY_MODES`].
pub fn two_mode_mixture(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, TOY_SIGMA).expect("finite");
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let m = TOY_MODES[rng.random_range(0..2)];
        data.push(m[0] + normal.sample(rng));
        data.push(m[1] + normal.sample(rng));
    }
    Tensor::new(vec![n, 2], data).expect("n × 2")
}

/// Distance to the nearest mode in units of σ.
pub fn mode_distance(p: [f64; 2]) -> f64 {
    TOY_MODES.iter().map(|m| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt() / TOY_SIGMA).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{pearson, sf_ag};

    #[test]
    fn deterministic() {
        let a = generate(SynthKind::Ivif, 3, 16, 9).unwrap();
        let b = generate(SynthKind::Ivif, 3, 16, 9).unwrap();
        assert_eq!(a, b);
        assert!(generate(SynthKind::Mef, 1, 18, 0).is_err());
    }

    #[test]
    fn ivif_is_complementary() {
        for p in generate(SynthKind::Ivif, 5, 32, 1).unwrap() {
            assert!(pearson(p.a.data(), p.b.data()) < 0.95);
        }
    }

    #[test]
    fn mff_halves_are_sharper() {
        let crop = |img: &Image, left: bool| Image::gray_from_fn(32, 16, |r, c| img.get(0, r, if left { c } else { c + 16 }));
        for p in generate(SynthKind::Mff, 4, 32, 2).unwrap() {
            let sf = |img: &Image, left| sf_ag(&crop(img, left)).unwrap().0;
            assert!(sf(&p.a, true) > sf(&p.b, true));
            assert!(sf(&p.b, false) > sf(&p.a, false));
        }
    }

    #[test]
    fn mixture_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = two_mode_mixture(4000, &mut rng);
        assert!(x.mean().abs() < 0.3);
        let near = x.data().chunks(2).filter(|p| mode_distance([p[0], p[1]]) < 3.0).count();
        assert!(near as f64 / 4000.0 > 0.98);
    }
}
