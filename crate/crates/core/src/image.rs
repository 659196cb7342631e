//! Planar images in the canonical `[0, 1]` domain and the image primitives
//! shared by the losses and metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Gray,
    Rgb,
    YCbCr,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb | ColorSpace::YCbCr => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Planar `[C, H, W]` image; every value is clamped to `[0, 1]` on entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    space: ColorSpace,
    data: Vec<f64>,
}

fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

impl Image {
    pub fn new(height: usize, width: usize, space: ColorSpace, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Image("empty image".into()));
        }
        let n = height * width * space.channels();
        if data.len() != n {
            return Err(Error::Image(format!("{height}×{width} {space:?} needs {n} values, got {}", data.len())));
        }
        Ok(Image { height, width, space, data: data.into_iter().map(clamp01).collect() })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, ColorSpace::Gray, data)
    }

    pub fn gray_from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::gray(height, width, data).expect("valid dimensions")
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::gray(height, width, vec![value; height * width]).expect("valid dimensions")
    }

    /// Accepts `[H, W]` (gray) or `[C, H, W]` tensors; values are clamped.
    pub fn from_tensor(t: &Tensor, space: ColorSpace) -> Result<Self> {
        let (h, w) = match (t.shape(), space.channels()) {
            ([h, w], 1) => (*h, *w),
            ([c, h, w], ch) if *c == ch => (*h, *w),
            (s, _) => {
                return Err(Error::Image(format!("tensor shape {s:?} does not match {space:?}")));
            }
        };
        Self::new(h, w, space, t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn is_gray(&self) -> bool {
        self.space == ColorSpace::Gray
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `[H, W]` tensor of one channel.
    pub fn plane_tensor(&self, c: usize) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.plane(c).to_vec()).expect("valid plane")
    }

    /// `[C, H, W]` tensor of all channels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels(), self.height, self.width], self.data.clone()).expect("valid image")
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch { op: "image", left: vec![self.height, self.width], right: vec![other.height, other.width] });
        }
        Ok(())
    }

    fn require_gray(&self, op: &str) -> Result<()> {
        if !self.is_gray() {
            return Err(Error::Image(format!("{op} requires a 1-channel image, got {:?}", self.space)));
        }
        Ok(())
    }

    /// Luma as a gray image: Y of BT.601 for RGB, channel 0 for YCbCr.
    pub fn luma(&self) -> Image {
        match self.space {
            ColorSpace::Gray => self.clone(),
            ColorSpace::YCbCr => Image::gray(self.height, self.width, self.plane(0).to_vec()).expect("valid"),
            ColorSpace::Rgb => {
                let y = rgb_ycbcr(self, Direction::Forward).expect("rgb input");
                Image::gray(self.height, self.width, y.plane(0).to_vec()).expect("valid")
            }
        }
    }

    /// Replaces channel 0 of a YCbCr image with `y`.
    pub fn with_luma(&self, y: &Image) -> Result<Image> {
        if self.space != ColorSpace::YCbCr {
            return Err(Error::Image("with_luma expects a YCbCr image".into()));
        }
        self.same_dims(y)?;
        y.require_gray("with_luma")?;
        let mut data = self.data.clone();
        let n = self.height * self.width;
        data[..n].copy_from_slice(y.data());
        Image::new(self.height, self.width, self.space, data)
    }

    /// 8-bit quantization, `round(v * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, space: ColorSpace, bytes: &[u8]) -> Result<Image> {
        Image::new(height, width, space, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

pub(crate) const RGB_TO_YCC: [[f64; 3]; 3] = [[0.299, 0.587, 0.114], [-0.168_736, -0.331_264, 0.5], [0.5, -0.418_688, -0.081_312]];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

fn ycc_to_rgb_matrix() -> [[f64; 3]; 3] {
    invert3(&RGB_TO_YCC)
}

/// BT.601 full-range conversion of one pixel without clamping.
pub fn ycbcr_pixel(p: [f64; 3], direction: Direction) -> [f64; 3] {
    match direction {
        Direction::Forward => {
            let m = &RGB_TO_YCC;
            [
                m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
                m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + 0.5,
                m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + 0.5,
            ]
        }
        Direction::Inverse => {
            let m = ycc_to_rgb_matrix();
            let q = [p[0], p[1] - 0.5, p[2] - 0.5];
            [
                m[0][0] * q[0] + m[0][1] * q[1] + m[0][2] * q[2],
                m[1][0] * q[0] + m[1][1] * q[1] + m[1][2] * q[2],
                m[2][0] * q[0] + m[2][1] * q[1] + m[2][2] * q[2],
            ]
        }
    }
}

/// RGB ⇄ YCbCr (BT.601 full range). Output is clamped to `[0, 1]`.
pub fn rgb_ycbcr(img: &Image, direction: Direction) -> Result<Image> {
    let (expected, target) = match direction {
        Direction::Forward => (ColorSpace::Rgb, ColorSpace::YCbCr),
        Direction::Inverse => (ColorSpace::YCbCr, ColorSpace::Rgb),
    };
    if img.space != expected {
        return Err(Error::Image(format!("{direction:?} color conversion expects {expected:?}, got {:?}", img.space)));
    }
    let n = img.height * img.width;
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let q = ycbcr_pixel([img.data[i], img.data[n + i], img.data[2 * n + i]], direction);
        for c in 0..3 {
            out[c * n + i] = q[c];
        }
    }
    Image::new(img.height, img.width, target, out)
}

/// 3×3 Sobel responses with replicate padding plus the gradient magnitude.
pub fn sobel_grad(img: &Image) -> Result<(Tensor, Tensor, Tensor)> {
    img.require_gray("sobel_grad")?;
    let (h, w) = img.dims();
    if h < 3 || w < 3 {
        return Err(Error::Image(format!("sobel_grad needs at least 3×3, got {h}×{w}")));
    }
    let px = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        img.data[r * w + c]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            gx[i] = (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1)) - (px(r - 1, c - 1) + 2.0 * px(r, c - 1) + px(r + 1, c - 1));
            gy[i] = (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1)) - (px(r - 1, c - 1) + 2.0 * px(r - 1, c) + px(r - 1, c + 1));
        }
    }
    let mag = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    Ok((Tensor::new(vec![h, w], gx)?, Tensor::new(vec![h, w], gy)?, Tensor::new(vec![h, w], mag)?))
}

/// Index of the 256-level bin for a `[0, 1]` value; the last bin is closed.
pub fn bin256(v: f64) -> usize {
    ((v * 256.0).floor() as isize).clamp(0, 255) as usize
}

pub fn histogram_counts(img: &Image) -> Result<[u64; 256]> {
    img.require_gray("histogram256")?;
    let mut counts = [0u64; 256];
    for &v in &img.data {
        counts[bin256(v)] += 1;
    }
    Ok(counts)
}

/// Normalized 256-bin histogram.
pub fn histogram256(img: &Image) -> Result<Vec<f64>> {
    let counts = histogram_counts(img)?;
    let n = img.numel() as f64;
    Ok(counts.iter().map(|&c| c as f64 / n).collect())
}

/// Normalized 1-D Gaussian taps of the given radius.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Normalized `size × size` Gaussian window (`size` odd).
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma, size / 2);
    let mut win = Vec::with_capacity(size * size);
    for a in &taps {
        for b in &taps {
            win.push(a * b);
        }
    }
    win
}

/// Separable Gaussian blur of an `[H, W]` plane with replicate padding.
/// Radius is `ceil(3σ)`.
pub fn gaussian_blur(plane: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = match plane.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::InvalidShape { op: "gaussian_blur", msg: format!("expected H×W, got {s:?}") }),
    };
    let radius = (3.0 * sigma).ceil() as usize;
    let taps = gaussian_taps(sigma, radius);
    let x = plane.data();
    let r = radius as isize;
    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let c = (col as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += t * x[row * w + c];
            }
            tmp[row * w + col] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let rr = (row as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += t * tmp[rr * w + col];
            }
            out[row * w + col] = acc;
        }
    }
    Tensor::new(vec![h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_on_entry() {
        let img = Image::gray(1, 3, vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
        assert!(Image::gray(0, 3, vec![]).is_err());
    }

    #[test]
    fn white_and_black_to_ycc() {
        let white = Image::new(1, 1, ColorSpace::Rgb, vec![1.0, 1.0, 1.0]).unwrap();
        let y = rgb_ycbcr(&white, Direction::Forward).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 0.5).abs() < 1e-12 && (y.data()[2] - 0.5).abs() < 1e-12);
        let black = Image::new(1, 1, ColorSpace::Rgb, vec![0.0; 3]).unwrap();
        let y = rgb_ycbcr(&black, Direction::Forward).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.5).abs() < 1e-12 && (y.data()[2] - 0.5).abs() < 1e-12);
        assert!(rgb_ycbcr(&Image::constant(2, 2, 0.3), Direction::Forward).is_err());
    }

    #[test]
    fn pixel_round_trip() {
        for k in 0..50 {
            let p = [(k as f64 * 0.13).fract(), (k as f64 * 0.71).fract(), (k as f64 * 0.29).fract()];
            let q = ycbcr_pixel(ycbcr_pixel(p, Direction::Forward), Direction::Inverse);
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sobel_edges() {
        let flat = Image::constant(5, 5, 0.4);
        let (gx, gy, mag) = sobel_grad(&flat).unwrap();
        assert!(gx.data().iter().chain(gy.data()).chain(mag.data()).all(|&v| v == 0.0));

        let step = Image::gray_from_fn(6, 6, |_, c| if c >= 3 { 1.0 } else { 0.0 });
        let (gx, gy, _) = sobel_grad(&step).unwrap();
        assert!(gy.data().iter().all(|&v| v == 0.0));
        let peak = gx.max();
        for r in 0..6 {
            assert_eq!(gx.data()[r * 6 + 2], peak);
            assert_eq!(gx.data()[r * 6 + 3], peak);
            assert_eq!(gx.data()[r * 6], 0.0);
        }
        assert!(sobel_grad(&Image::constant(2, 5, 0.0)).is_err());
        let rgb = Image::new(3, 3, ColorSpace::Rgb, vec![0.0; 27]).unwrap();
        assert!(sobel_grad(&rgb).is_err());
    }

    #[test]
    fn histogram_cases() {
        let p = histogram256(&Image::constant(4, 4, 0.0)).unwrap();
        assert_eq!(p[0], 1.0);
        let half = Image::gray_from_fn(4, 4, |r, _| if r < 2 { 0.0 } else { 1.0 });
        let p = histogram256(&half).unwrap();
        assert_eq!((p[0], p[255]), (0.5, 0.5));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constant() {
        let t = Tensor::full(&[7, 9], 0.3);
        let b = gaussian_blur(&t, 3.0).unwrap();
        assert!(b.max_abs_diff(&t).unwrap() < 1e-12);
    }
}
