//! Paired datasets on disk: `A/` and `B/` directories with matching names.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rffusion::config::{Config, StartMode};
use rffusion::imageio::{read_image, write_image};
use rffusion::synth::{self, SynthKind, SynthPair};
use rffusion::Image;

const IMAGE_EXTS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

pub fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Sorted image file names in `dir`.
pub fn image_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && is_image(&path) {
            if let Some(n) = path.file_name().and_then(|n| n.to_str()) {
                names.push(n.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes `pairs` under `dir/A` and `dir/B`.
pub fn write_pairs(dir: &Path, pairs: &[SynthPair]) -> Result<()> {
    for sub in ["A", "B"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for p in pairs {
        write_image(&p.a, &dir.join("A").join(&p.name))?;
        write_image(&p.b, &dir.join("B").join(&p.name))?;
    }
    Ok(())
}

/// Reads every name present in both `dir/A` and `dir/B`.
pub fn read_pairs(dir: &Path) -> Result<Vec<SynthPair>> {
    let (da, db) = (dir.join("A"), dir.join("B"));
    let b_names = image_names(&db)?;
    let mut out = Vec::new();
    for name in image_names(&da)? {
        if !b_names.contains(&name) {
            continue;
        }
        out.push(SynthPair {
            a: read_image(&da.join(&name)).with_context(|| format!("reading A/{name}"))?,
            b: read_image(&db.join(&name)).with_context(|| format!("reading B/{name}"))?,
            name,
        });
    }
    if out.is_empty() {
        bail!("no matching A/B image pairs under {}", dir.display());
    }
    Ok(out)
}

/// The configured dataset: `data.dir` when set, otherwise pairs synthesized
/// from `data.kind`, `data.count`, `data.size` and the run seed.
pub fn dataset(cfg: &Config) -> Result<Vec<SynthPair>> {
    match &cfg.data.dir {
        Some(d) => read_pairs(d),
        None => Ok(synth::generate(cfg.data.kind, cfg.data.count, cfg.data.size, cfg.run.seed)?),
    }
}

/// Whether source A seeds the sampler.
pub fn seeds_from_a(start: StartMode, kind: SynthKind) -> bool {
    match start {
        StartMode::A => true,
        StartMode::B | StartMode::Noise => false,
        StartMode::Auto => kind == SynthKind::Mff,
    }
}

/// `(other, seed)` for one pair, the order used by guidance and stage II.
pub fn roles(cfg: &Config, a: &Image, b: &Image) -> (Image, Image) {
    if seeds_from_a(cfg.flow.start, cfg.data.kind) {
        (b.clone(), a.clone())
    } else {
        (a.clone(), b.clone())
    }
}

/// Converts to the codec's channel count: luma for gray codecs, channel
/// replication for color codecs fed gray input.
pub fn to_channels(img: &Image, channels: usize) -> Result<Image> {
    use rffusion::ColorSpace;
    match (channels, img.space()) {
        (1, _) => Ok(img.luma()),
        (3, ColorSpace::Rgb) => Ok(img.clone()),
        (3, ColorSpace::Gray) => {
            let mut data = Vec::with_capacity(3 * img.numel());
            for _ in 0..3 {
                data.extend_from_slice(img.data());
            }
            Ok(Image::new(img.height(), img.width(), ColorSpace::Rgb, data)?)
        }
        (3, ColorSpace::YCbCr) => Ok(rffusion::image::rgb_ycbcr(img, rffusion::image::Direction::Inverse)?),
        (c, _) => bail!("unsupported codec channel count {c}"),
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

/// Refuses to replace an existing file unless `force` is set.
pub fn check_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}
