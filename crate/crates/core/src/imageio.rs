//! 8-bit PNG and binary PGM/PPM I/O. Pixels convert by `/255` on read and
//! `round(·255)` on write, so 8-bit files round-trip exactly.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::image::{rgb_ycbcr, ColorSpace, Direction, Image};

/// Reads a PNG, PGM or PPM file. Gray files become [`ColorSpace::Gray`],
/// everything else is converted to 8-bit RGB.
pub fn read_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    match dynimg {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Image::from_u8(h as usize, w as usize, ColorSpace::Gray, g.as_raw())
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let n = (w * h) as usize;
            let raw = rgb.as_raw();
            let mut planar = vec![0u8; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    planar[c * n + i] = raw[3 * i + c];
                }
            }
            Image::from_u8(h as usize, w as usize, ColorSpace::Rgb, &planar)
        }
    }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "png" => Ok(ImageFormat::Png),
        Some(e) if e == "pgm" || e == "ppm" || e == "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::Image(format!("unsupported output extension: {}", path.display()))),
    }
}

/// Writes an image; YCbCr inputs are converted back to RGB first.
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    let (h, w) = img.dims();
    let dynimg = match img.space() {
        ColorSpace::Gray => {
            let buf = GrayImage::from_raw(w as u32, h as u32, img.to_u8()).ok_or_else(|| Error::Image("buffer size".into()))?;
            DynamicImage::ImageLuma8(buf)
        }
        space => {
            let rgb = if space == ColorSpace::YCbCr { rgb_ycbcr(img, Direction::Inverse)? } else { img.clone() };
            let planar = rgb.to_u8();
            let n = h * w;
            let mut inter = vec![0u8; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    inter[3 * i + c] = planar[c * n + i];
                }
            }
            let buf = RgbImage::from_raw(w as u32, h as u32, inter).ok_or_else(|| Error::Image("buffer size".into()))?;
            DynamicImage::ImageRgb8(buf)
        }
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dynimg.save_with_format(path, format)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..=255u8).collect();
        let gray = Image::from_u8(16, 16, ColorSpace::Gray, &bytes).unwrap();
        let rgb_bytes: Vec<u8> = (0..3 * 64).map(|i| (i * 37 % 256) as u8).collect();
        let rgb = Image::from_u8(8, 8, ColorSpace::Rgb, &rgb_bytes).unwrap();
        for name in ["g.png", "g.pgm"] {
            let p = dir.path().join(name);
            write_image(&gray, &p).unwrap();
            assert_eq!(read_image(&p).unwrap().to_u8(), bytes);
        }
        for name in ["c.png", "c.ppm"] {
            let p = dir.path().join(name);
            write_image(&rgb, &p).unwrap();
            let back = read_image(&p).unwrap();
            assert_eq!(back.space(), ColorSpace::Rgb);
            assert_eq!(back.to_u8(), rgb_bytes);
        }
        assert!(write_image(&gray, &dir.path().join("x.bmp")).is_err());
    }
}
