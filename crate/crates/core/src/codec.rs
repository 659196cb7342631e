//! Convolutional latent codec with its two training stages and losses.
//!
//! Encoder: conv3×3/2 (C→32), lrelu, conv3×3/2 (32→64), lrelu,
//! conv3×3 (64→4). Decoder: conv3×3 (4→64), lrelu, convT/2 (64→32), lrelu,
//! convT/2 (32→C), clamp to `[0, 1]` with a straight-through gradient.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{adam_step, AdamConfig, BoundParams, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::fft;
use crate::guidance::{saliency_weights, WeightMaps};
use crate::image::{ColorSpace, Image, RGB_TO_YCC};
use crate::metrics::{ssim_taps, SSIM_C1, SSIM_C2};
use crate::tensor::Tensor;

pub const LATENT_DOWNSCALE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    /// Image channels, 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Output channels of the three encoder convolutions; the last is the
    /// latent depth.
    pub widths: [usize; 3],
    pub slope: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { channels: 1, widths: [32, 64, 4], slope: 0.2 }
    }
}

impl CodecConfig {
    pub fn latent_channels(&self) -> usize {
        self.widths[2]
    }

    pub fn space(&self) -> ColorSpace {
        if self.channels == 3 {
            ColorSpace::Rgb
        } else {
            ColorSpace::Gray
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!("codec channels must be 1 or 3, got {}", self.channels)));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument("codec widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Freeze {
    #[default]
    None,
    Encoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    pub config: CodecConfig,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub freeze: Freeze,
}

/// `(name, out, in, transposed)` for each layer.
fn layers(cfg: &CodecConfig) -> [(&'static str, usize, usize, bool); 6] {
    let [a, b, z] = cfg.widths;
    [
        ("encoder.conv0", a, cfg.channels, false),
        ("encoder.conv1", b, a, false),
        ("encoder.conv2", z, b, false),
        ("decoder.conv0", b, z, false),
        ("decoder.up0", a, b, true),
        ("decoder.up1", cfg.channels, a, true),
    ]
}

fn weight_shape(out: usize, inp: usize, transposed: bool) -> [usize; 4] {
    if transposed {
        [inp, out, 3, 3]
    } else {
        [out, inp, 3, 3]
    }
}

impl CodecParams {
    /// He-normal weights and zero biases; the output layer bias starts at 0.5.
    pub fn init(config: CodecConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut encoder = ParamSet::new();
        let mut decoder = ParamSet::new();
        let last = layers(&config).len() - 1;
        for (k, (name, out, inp, tr)) in layers(&config).into_iter().enumerate() {
            let fan_in = if tr { inp * 9 / 4 } else { inp * 9 }.max(1);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let w = Tensor::from_fn(&weight_shape(out, inp, tr), |_| normal.sample(rng));
            let b = Tensor::full(&[out], if k == last { 0.5 } else { 0.0 });
            let set = if name.starts_with("encoder") { &mut encoder } else { &mut decoder };
            set.insert(&format!("{name}.weight"), w)?;
            set.insert(&format!("{name}.bias"), b)?;
        }
        Ok(CodecParams { config, encoder, decoder, freeze: Freeze::None })
    }

    /// Reassembles parameters loaded from disk, inferring the configuration.
    pub fn from_parts(encoder: ParamSet, decoder: ParamSet, freeze: Freeze) -> Result<Self> {
        let shape = |set: &ParamSet, n: &str| {
            set.get(n).map(|t| t.shape().to_vec()).ok_or_else(|| Error::Checkpoint(format!("missing codec tensor `{n}`")))
        };
        let w0 = shape(&encoder, "encoder.conv0.weight")?;
        let w1 = shape(&encoder, "encoder.conv1.weight")?;
        let w2 = shape(&encoder, "encoder.conv2.weight")?;
        if w0.len() != 4 || w1.len() != 4 || w2.len() != 4 {
            return Err(Error::Checkpoint("codec weights must be rank 4".into()));
        }
        let config = CodecConfig { channels: w0[1], widths: [w0[0], w1[0], w2[0]], ..Default::default() };
        config.validate()?;
        for (name, out, inp, tr) in layers(&config) {
            let set = if name.starts_with("encoder") { &encoder } else { &decoder };
            if shape(set, &format!("{name}.weight"))? != weight_shape(out, inp, tr) || shape(set, &format!("{name}.bias"))? != [out] {
                return Err(Error::Checkpoint(format!("codec layer `{name}` has unexpected shape")));
            }
        }
        Ok(CodecParams { config, encoder, decoder, freeze })
    }

    /// Adam steps taken by the decoder.
    pub fn decoder_steps(&self) -> u64 {
        self.decoder.state("decoder.conv0.weight").map_or(0, |s| s.step)
    }
}

fn encoder_graph(cfg: &CodecConfig, g: &mut Graph, b: &BoundParams, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (k, stride) in [(0, 2), (1, 2), (2, 1)] {
        h = g.conv2d(h, b.id(&format!("encoder.conv{k}.weight")), stride, 1)?;
        h = g.channel_bias(h, b.id(&format!("encoder.conv{k}.bias")))?;
        if k < 2 {
            h = g.leaky_relu(h, cfg.slope)?;
        }
    }
    Ok(h)
}

fn decoder_graph(cfg: &CodecConfig, g: &mut Graph, b: &BoundParams, z: NodeId) -> Result<NodeId> {
    let mut h = g.conv2d(z, b.id("decoder.conv0.weight"), 1, 1)?;
    h = g.channel_bias(h, b.id("decoder.conv0.bias"))?;
    h = g.leaky_relu(h, cfg.slope)?;
    h = g.conv_transpose2d(h, b.id("decoder.up0.weight"), 2, 1, 1)?;
    h = g.channel_bias(h, b.id("decoder.up0.bias"))?;
    h = g.leaky_relu(h, cfg.slope)?;
    h = g.conv_transpose2d(h, b.id("decoder.up1.weight"), 2, 1, 1)?;
    h = g.channel_bias(h, b.id("decoder.up1.bias"))?;
    g.clamp(h, 0.0, 1.0)
}

/// Stacks images into `[N, C, H, W]`, checking the codec contract.
pub fn images_to_batch(cfg: &CodecConfig, imgs: &[Image]) -> Result<Tensor> {
    let first = imgs.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = first.dims();
    let d = LATENT_DOWNSCALE;
    if h % d != 0 || w % d != 0 {
        return Err(Error::InvalidShape {
            op: "encode",
            msg: format!("{h}×{w} is not divisible by {d}; pad to {}×{}", h.div_ceil(d) * d, w.div_ceil(d) * d),
        });
    }
    let mut data = Vec::with_capacity(imgs.len() * cfg.channels * h * w);
    for img in imgs {
        first.same_dims(img)?;
        if img.channels() != cfg.channels {
            return Err(Error::Image(format!("codec expects {} channels, got {}", cfg.channels, img.channels())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![imgs.len(), cfg.channels, h, w], data)
}

fn batch_to_images(cfg: &CodecConfig, t: &Tensor) -> Result<Vec<Image>> {
    let [n, c, h, w] = t.shape() else {
        return Err(Error::InvalidShape { op: "decode", msg: format!("expected [N, C, H, W], got {:?}", t.shape()) });
    };
    let per = c * h * w;
    (0..*n).map(|k| Image::new(*h, *w, cfg.space(), t.data()[k * per..(k + 1) * per].to_vec())).collect()
}

/// Latents `[N, 4, H/4, W/4]` for a batch of images.
pub fn encode_batch(p: &CodecParams, imgs: &[Image]) -> Result<Tensor> {
    let x = images_to_batch(&p.config, imgs)?;
    let mut g = Graph::new();
    let b = p.encoder.bind(&mut g);
    let xin = g.constant(x);
    let z = encoder_graph(&p.config, &mut g, &b, xin)?;
    Ok(g.value(z).clone())
}

/// Latent `[4, H/4, W/4]` of one image.
pub fn encode(p: &CodecParams, img: &Image) -> Result<Tensor> {
    let z = encode_batch(p, std::slice::from_ref(img))?;
    let s = z.shape()[1..].to_vec();
    z.reshape(&s)
}

pub fn decode_batch(p: &CodecParams, z: &Tensor) -> Result<Vec<Image>> {
    if z.rank() != 4 || z.shape()[1] != p.config.latent_channels() {
        return Err(Error::InvalidShape {
            op: "decode",
            msg: format!("expected [N, {}, h, w] latents, got {:?}", p.config.latent_channels(), z.shape()),
        });
    }
    let mut g = Graph::new();
    let b = p.decoder.bind(&mut g);
    let zin = g.constant(z.clone());
    let x = decoder_graph(&p.config, &mut g, &b, zin)?;
    batch_to_images(&p.config, g.value(x))
}

/// Image from a `[4, h, w]` latent.
pub fn decode(p: &CodecParams, z: &Tensor) -> Result<Image> {
    if z.rank() != 3 {
        return Err(Error::InvalidShape { op: "decode", msg: format!("expected [C, h, w], got {:?}", z.shape()) });
    }
    let mut s = vec![1];
    s.extend_from_slice(z.shape());
    Ok(decode_batch(p, &z.reshape(&s)?)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub fre: f64,
    pub int: f64,
    pub ssim: f64,
    pub grad: f64,
    pub color: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { fre: 0.1, int: 1.0, ssim: 1.0, grad: 1.0, color: 0.5, mask: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.fre, self.int, self.ssim, self.grad, self.color, self.mask];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Mean over channels, `[N, C, H, W] -> [N, 1, H, W]`.
fn channel_mean(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let c = g.shape(x)[1];
    if c == 1 {
        return Ok(x);
    }
    let mut acc = g.slice_channel(x, 0)?;
    for k in 1..c {
        let s = g.slice_channel(x, k)?;
        acc = g.add(acc, s)?;
    }
    g.scale(acc, 1.0 / c as f64)
}

/// `N(log1p |fftshift(fft2(x))|)` per image.
fn spectrum_node(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let m = channel_mean(g, x)?;
    let z = g.fft2(m)?;
    let a = g.magnitude(z)?;
    let l = g.log1p(a)?;
    let s = g.fftshift(l)?;
    g.min_max_norm(s)
}

/// Frequency loss between two `[N, C, H, W]` nodes.
pub fn freq_loss_node(g: &mut Graph, x: NodeId, xr: NodeId) -> Result<NodeId> {
    let a = spectrum_node(g, x)?;
    let b = spectrum_node(g, xr)?;
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

fn min_max(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Normalized log-magnitude spectrum of an image (channel mean), on the
/// power-of-two padded grid.
pub fn log_spectrum(x: &Image) -> Result<Tensor> {
    let (h, w) = x.dims();
    let c = x.channels();
    let mut plane = vec![0.0; h * w];
    for k in 0..c {
        for (p, v) in plane.iter_mut().zip(x.plane(k)) {
            *p += v;
        }
    }
    if c > 1 {
        plane.iter_mut().for_each(|p| *p /= c as f64);
    }
    let spec = fft::fft2(&Tensor::new(vec![h, w], plane)?)?;
    let mag = spec.abs().map(f64::ln_1p);
    let shifted = fft::fftshift_real(&mag)?;
    Tensor::new(shifted.shape().to_vec(), min_max(shifted.data()))
}

/// Mean squared difference of the normalized log-magnitude spectra.
pub fn freq_loss(x: &Image, xr: &Image) -> Result<f64> {
    x.same_dims(xr)?;
    if x.channels() != xr.channels() {
        return Err(Error::Image("freq_loss needs matching channel counts".into()));
    }
    let a = log_spectrum(x)?;
    let b = log_spectrum(xr)?;
    Ok(a.zip_map(&b, "freq_loss", |p, q| (p - q) * (p - q))?.mean())
}

fn window_node(g: &mut Graph, h: usize, w: usize) -> Result<(NodeId, usize)> {
    let taps = ssim_taps(h, w);
    let n = taps.len();
    let win = Tensor::from_fn(&[1, 1, n, n], |k| taps[k / n] * taps[k % n]);
    Ok((g.constant(win), n))
}

/// Mean SSIM of two `[N, 1, H, W]` nodes over valid window positions.
pub fn ssim_node(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (win, _) = window_node(g, s[2], s[3])?;
    let blur = |g: &mut Graph, a: NodeId| g.conv2d(a, win, 1, 0);
    let mx = blur(g, x)?;
    let my = blur(g, y)?;
    let xx = g.square(x)?;
    let yy = g.square(y)?;
    let xy = g.mul(x, y)?;
    let exx = blur(g, xx)?;
    let eyy = blur(g, yy)?;
    let exy = blur(g, xy)?;
    let mx2 = g.square(mx)?;
    let my2 = g.square(my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;
    let n1 = g.scale(mxy, 2.0)?;
    let n1 = g.add_scalar(n1, SSIM_C1)?;
    let n2 = g.scale(cxy, 2.0)?;
    let n2 = g.add_scalar(n2, SSIM_C2)?;
    let d1 = g.add(mx2, my2)?;
    let d1 = g.add_scalar(d1, SSIM_C1)?;
    let d2 = g.add(vx, vy)?;
    let d2 = g.add_scalar(d2, SSIM_C2)?;
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    g.mean(map)
}

fn sobel_weight() -> Tensor {
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    Tensor::new(vec![2, 1, 3, 3], gx.iter().chain(&gy).copied().collect()).expect("sobel")
}

/// `|∂x| + |∂y|` Sobel magnitude of `[N, 1, H, W]`, replicate padded.
pub fn grad_node(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let p = g.pad_replicate(x, 1)?;
    let w = g.constant(sobel_weight());
    let r = g.conv2d(p, w, 1, 0)?;
    let a = g.abs(r)?;
    let gx = g.slice_channel(a, 0)?;
    let gy = g.slice_channel(a, 1)?;
    g.add(gx, gy)
}

/// `|∂x| + |∂y|` Sobel magnitude of a gray image.
pub fn grad_l1(img: &Image) -> Result<Tensor> {
    let (gx, gy, _) = crate::image::sobel_grad(img)?;
    gx.zip_map(&gy, "grad_l1", |a, b| a.abs() + b.abs())
}

/// Linear combination of RGB channels plus an offset.
fn rgb_combo(g: &mut Graph, x: NodeId, coeffs: [f64; 3], offset: f64) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for (k, c) in coeffs.into_iter().enumerate() {
        let ch = g.slice_channel(x, k)?;
        let t = g.scale(ch, c)?;
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    g.add_scalar(acc.expect("three channels"), offset)
}

fn luma_node(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    if g.shape(x)[1] == 1 {
        return Ok(x);
    }
    rgb_combo(g, x, RGB_TO_YCC[0], 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FusionComponents {
    pub int: f64,
    pub ssim: f64,
    pub grad: f64,
    pub color: f64,
    pub mask: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionLoss {
    pub total: f64,
    pub components: FusionComponents,
}

/// Constant side of the fusion loss for a batch of `(i, v)` pairs.
#[derive(Debug, Clone)]
pub struct FusionTargets {
    pub i: Tensor,
    pub v_luma: Tensor,
    pub int_max: Tensor,
    pub grad_max: Tensor,
    pub blend: Tensor,
    /// `(Cb, Cr)` of color visible images.
    pub chroma: Option<(Tensor, Tensor)>,
}

impl FusionTargets {
    /// Uses saliency weights unless `maps` is given.
    pub fn new(pairs: &[(Image, Image)], maps: Option<&[WeightMaps]>) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::InvalidArgument("empty fusion batch".into()))?;
        let (h, w) = first.0.dims();
        let n = pairs.len();
        if let Some(m) = maps {
            if m.len() != n {
                return Err(Error::InvalidArgument(format!("{} weight maps for {n} pairs", m.len())));
            }
        }
        let color = !first.1.is_gray();
        let (mut i, mut vl, mut im, mut gm, mut bl, mut cb, mut cr) = (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
        for (k, (a, b)) in pairs.iter().enumerate() {
            if !a.is_gray() {
                return Err(Error::Image("infrared source must be gray".into()));
            }
            a.same_dims(b)?;
            first.0.same_dims(a)?;
            if b.is_gray() == color {
                return Err(Error::Image("visible sources must share a color space".into()));
            }
            let y = b.luma();
            let wm = match maps {
                Some(m) => m[k].clone(),
                None => saliency_weights(a, &y)?,
            };
            if wm.dims() != (h, w) {
                return Err(Error::InvalidArgument("weight map size differs from the images".into()));
            }
            let (ga, gb) = (grad_l1(a)?, grad_l1(&y)?);
            for p in 0..h * w {
                let (x, z) = (a.data()[p], y.data()[p]);
                i.push(x);
                vl.push(z);
                im.push(x.max(z));
                gm.push(ga.data()[p].max(gb.data()[p]));
                bl.push(wm.w_v.data()[p] * z + wm.w_ir.data()[p] * x);
            }
            if color {
                let ycc = match b.space() {
                    ColorSpace::YCbCr => b.clone(),
                    _ => crate::image::rgb_ycbcr(b, crate::image::Direction::Forward)?,
                };
                cb.extend_from_slice(ycc.plane(1));
                cr.extend_from_slice(ycc.plane(2));
            }
        }
        let s = vec![n, 1, h, w];
        let t = |d: Vec<f64>| Tensor::new(s.clone(), d);
        Ok(FusionTargets {
            i: t(i)?,
            v_luma: t(vl)?,
            int_max: t(im)?,
            grad_max: t(gm)?,
            blend: t(bl)?,
            chroma: if color { Some((t(cb)?, t(cr)?)) } else { None },
        })
    }
}

/// Nodes of the fusion loss, unweighted components plus the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct FusionNodes {
    pub total: NodeId,
    pub int: NodeId,
    pub ssim: NodeId,
    pub grad: NodeId,
    pub color: NodeId,
    pub mask: NodeId,
}

fn l1_node(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d)?;
    g.mean(ad)
}

/// Builds the fusion loss for fused images `f` (`[N, C, H, W]`).
pub fn fusion_loss_nodes(g: &mut Graph, f: NodeId, tg: &FusionTargets, w: &LossWeights) -> Result<FusionNodes> {
    w.validate()?;
    let fy = luma_node(g, f)?;
    let c = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    let im = c(g, &tg.int_max);
    let int = l1_node(g, fy, im)?;
    let i = c(g, &tg.i);
    let v = c(g, &tg.v_luma);
    let si = ssim_node(g, fy, i)?;
    let sv = ssim_node(g, fy, v)?;
    let ssum = g.add(si, sv)?;
    let neg = g.scale(ssum, -1.0)?;
    let ssim = g.add_scalar(neg, 2.0)?;
    let gf = grad_node(g, fy)?;
    let gm = c(g, &tg.grad_max);
    let grad = l1_node(g, gf, gm)?;
    let color = match (&tg.chroma, g.shape(f)[1]) {
        (Some((cb, cr)), 3) => {
            let fcb = rgb_combo(g, f, RGB_TO_YCC[1], 0.5)?;
            let fcr = rgb_combo(g, f, RGB_TO_YCC[2], 0.5)?;
            let tcb = c(g, cb);
            let tcr = c(g, cr);
            let a = l1_node(g, fcb, tcb)?;
            let b = l1_node(g, fcr, tcr)?;
            let s = g.add(a, b)?;
            g.scale(s, 0.5)?
        }
        (None, 1) => g.constant(Tensor::scalar(0.0)),
        _ => return Err(Error::Image("fused and visible images disagree on color".into())),
    };
    let b = c(g, &tg.blend);
    let mask = l1_node(g, b, fy)?;
    let mut total: Option<NodeId> = None;
    for (node, lam) in [(int, w.int), (ssim, w.ssim), (grad, w.grad), (color, w.color), (mask, w.mask)] {
        let t = g.scale(node, lam)?;
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    Ok(FusionNodes { total: total.expect("five terms"), int, ssim, grad, color, mask })
}

fn read_fusion(g: &Graph, n: &FusionNodes) -> FusionLoss {
    FusionLoss {
        total: g.value(n.total).item(),
        components: FusionComponents {
            int: g.value(n.int).item(),
            ssim: g.value(n.ssim).item(),
            grad: g.value(n.grad).item(),
            color: g.value(n.color).item(),
            mask: g.value(n.mask).item(),
        },
    }
}

/// Fusion loss of one fused image with saliency weights.
pub fn fusion_loss(f: &Image, i: &Image, v: &Image, w: &LossWeights) -> Result<FusionLoss> {
    fusion_loss_with(f, i, v, w, None)
}

pub fn fusion_loss_with(f: &Image, i: &Image, v: &Image, w: &LossWeights, maps: Option<&WeightMaps>) -> Result<FusionLoss> {
    f.same_dims(i)?;
    let tg = FusionTargets::new(&[(i.clone(), v.clone())], maps.map(std::slice::from_ref))?;
    let mut g = Graph::new();
    let mut s = vec![1, f.channels()];
    s.extend([f.height(), f.width()]);
    let fx = g.constant(Tensor::new(s, f.data().to_vec())?);
    let nodes = fusion_loss_nodes(&mut g, fx, &tg, w)?;
    Ok(read_fusion(&g, &nodes))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Losses {
    pub total: f64,
    pub rec: f64,
    pub fre: f64,
}

/// Stage-I objective graph. Returns `(graph, encoder, decoder, total, rec, fre)`.
pub fn stage1_graph(
    p: &CodecParams,
    batch: &[Image],
    w: &LossWeights,
) -> Result<(Graph, BoundParams, BoundParams, NodeId, NodeId, NodeId)> {
    w.validate()?;
    let x = images_to_batch(&p.config, batch)?;
    let mut g = Graph::new();
    let be = p.encoder.bind(&mut g);
    let bd = p.decoder.bind(&mut g);
    let xin = g.constant(x);
    let z = encoder_graph(&p.config, &mut g, &be, xin)?;
    let xr = decoder_graph(&p.config, &mut g, &bd, z)?;
    let rec = l1_node(&mut g, xr, xin)?;
    let fre = freq_loss_node(&mut g, xin, xr)?;
    let wf = g.scale(fre, w.fre)?;
    let total = g.add(rec, wf)?;
    Ok((g, be, bd, total, rec, fre))
}

fn non_finite(step: u64, parts: &[(&str, f64)]) -> Error {
    let breakdown = parts.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(", ");
    Error::NonFiniteLoss { step: step as usize, breakdown }
}

/// One Adam step on `L1(x, x̂) + λ_fre·freq_loss(x, x̂)`. Reports the losses
/// before the update.
pub fn stage1_step(p: &mut CodecParams, batch: &[Image], w: &LossWeights, adam: AdamConfig) -> Result<Stage1Losses> {
    if p.freeze != Freeze::None {
        return Err(Error::InvalidArgument("stage I trains the whole codec; unset freeze".into()));
    }
    let (g, be, bd, total, rec, fre) = stage1_graph(p, batch, w)?;
    let losses = Stage1Losses { total: g.value(total).item(), rec: g.value(rec).item(), fre: g.value(fre).item() };
    if !losses.total.is_finite() {
        return Err(non_finite(p.decoder_steps(), &[("rec", losses.rec), ("fre", losses.fre)]));
    }
    let mut ids = be.ids();
    ids.extend(bd.ids());
    let grads = g.backward(total, &ids)?;
    adam_step(&mut p.encoder, &be.collect(&grads, |_| true), adam)?;
    adam_step(&mut p.decoder, &bd.collect(&grads, |_| true), adam)?;
    Ok(losses)
}

/// Stage-II objective graph with `f = decode(encode(v))`. The encoder runs
/// outside the graph. Returns `(graph, decoder, nodes)`.
pub fn stage2_graph(
    p: &CodecParams,
    pairs: &[(Image, Image)],
    maps: Option<&[WeightMaps]>,
    w: &LossWeights,
) -> Result<(Graph, BoundParams, FusionNodes)> {
    let vis: Vec<Image> = pairs.iter().map(|(_, v)| v.clone()).collect();
    let z = encode_batch(p, &vis)?;
    let tg = FusionTargets::new(pairs, maps)?;
    let mut g = Graph::new();
    let bd = p.decoder.bind(&mut g);
    let zin = g.constant(z);
    let f = decoder_graph(&p.config, &mut g, &bd, zin)?;
    let nodes = fusion_loss_nodes(&mut g, f, &tg, w)?;
    Ok((g, bd, nodes))
}

/// One decoder-only Adam step on the fusion loss. Requires a frozen encoder.
pub fn stage2_step(
    p: &mut CodecParams,
    pairs: &[(Image, Image)],
    maps: Option<&[WeightMaps]>,
    w: &LossWeights,
    adam: AdamConfig,
) -> Result<FusionLoss> {
    if p.freeze != Freeze::Encoder {
        return Err(Error::InvalidArgument("stage II requires freeze = encoder".into()));
    }
    let (g, bd, nodes) = stage2_graph(p, pairs, maps, w)?;
    let loss = read_fusion(&g, &nodes);
    if !loss.total.is_finite() {
        let c = loss.components;
        return Err(non_finite(
            p.decoder_steps(),
            &[("int", c.int), ("ssim", c.ssim), ("grad", c.grad), ("color", c.color), ("mask", c.mask)],
        ));
    }
    let grads = g.backward(nodes.total, &bd.ids())?;
    adam_step(&mut p.decoder, &bd.collect(&grads, |_| true), adam)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn codec() -> CodecParams {
        CodecParams::init(CodecConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn tex(n: usize, k: f64) -> Image {
        Image::gray_from_fn(n, n, |r, c| 0.5 + 0.4 * ((r as f64 * k).sin() * (c as f64 * 0.6).cos()))
    }

    #[test]
    fn shape_contract() {
        let p = codec();
        let img = tex(32, 0.5);
        let z = encode(&p, &img).unwrap();
        assert_eq!(z.shape(), &[4, 8, 8]);
        assert_eq!(encode(&p, &img.clone()).unwrap(), z);
        let back = decode(&p, &z).unwrap();
        assert_eq!(back.dims(), (32, 32));
        assert!(freq_loss(&img, &back).unwrap().is_finite());
        let err = encode(&p, &tex(30, 0.5)).unwrap_err().to_string();
        assert!(err.contains("32×32"), "{err}");
        assert!(decode(&p, &Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn decoder_saturates() {
        let mut p = codec();
        let b = p.decoder.get("decoder.up1.bias").unwrap().map(|_| 10.0);
        let w = p.decoder.get("decoder.up1.weight").unwrap().map(|_| 0.0);
        p.decoder.replace("decoder.up1.bias", b).unwrap();
        p.decoder.replace("decoder.up1.weight", w).unwrap();
        let out = decode(&p, &Tensor::full(&[4, 2, 2], 0.3)).unwrap();
        assert!(out.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn freq_loss_basics() {
        let a = tex(8, 0.9);
        let b = tex(8, 0.3);
        assert_eq!(freq_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(freq_loss(&a, &b).unwrap(), freq_loss(&b, &a).unwrap());
        let c = Image::constant(8, 8, 0.4);
        assert!(freq_loss(&c, &c).unwrap() == 0.0);
    }

    #[test]
    fn freq_graph_matches_plain() {
        let a = tex(8, 0.9);
        let b = tex(8, 0.35);
        let mut g = Graph::new();
        let x = g.constant(a.to_tensor().reshape(&[1, 1, 8, 8]).unwrap());
        let y = g.constant(b.to_tensor().reshape(&[1, 1, 8, 8]).unwrap());
        let l = freq_loss_node(&mut g, x, y).unwrap();
        assert!((g.value(l).item() - freq_loss(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_graph_matches_metric() {
        let a = tex(16, 0.9);
        let b = tex(16, 0.35);
        let mut g = Graph::new();
        let x = g.constant(a.to_tensor().reshape(&[1, 1, 16, 16]).unwrap());
        let y = g.constant(b.to_tensor().reshape(&[1, 1, 16, 16]).unwrap());
        let s = ssim_node(&mut g, x, y).unwrap();
        assert!((g.value(s).item() - crate::metrics::ssim(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fusion_loss_degenerate() {
        let x = tex(16, 0.7);
        let l = fusion_loss(&x, &x, &x, &LossWeights::default()).unwrap();
        assert!(l.total.abs() < 1e-12, "{l:?}");
        let shifted = Image::gray_from_fn(16, 16, |r, c| x.get(0, r, c) * 0.5 + 0.1);
        let base = Image::gray_from_fn(16, 16, |r, c| x.get(0, r, c) * 0.5);
        let l = fusion_loss(&shifted, &base, &base, &LossWeights::default()).unwrap();
        assert!((l.components.int - 0.1).abs() < 1e-12);
        assert_eq!(l.components.color, 0.0);
    }

    #[test]
    fn stage_guards() {
        let mut p = codec();
        let pairs = vec![(tex(16, 0.5), tex(16, 0.8))];
        assert!(stage2_step(&mut p, &pairs, None, &LossWeights::default(), AdamConfig::default()).is_err());
        p.freeze = Freeze::Encoder;
        assert!(stage1_step(&mut p, &[tex(16, 0.5)], &LossWeights::default(), AdamConfig::default()).is_err());
        let before = p.encoder.clone();
        stage2_step(&mut p, &pairs, None, &LossWeights::default(), AdamConfig::default()).unwrap();
        assert_eq!(p.encoder, before);
    }

    #[test]
    fn from_parts_round_trip() {
        let p = codec();
        let q = CodecParams::from_parts(p.encoder.clone(), p.decoder.clone(), Freeze::None).unwrap();
        assert_eq!(p, q);
        assert!(CodecParams::from_parts(ParamSet::new(), p.decoder.clone(), Freeze::None).is_err());
    }
}
