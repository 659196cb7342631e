//! Inference: encode the seed source, run the guided sampler, decode.

use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rffusion::checkpoint::Checkpoint;
use rffusion::codec::{decode, encode, CodecParams, LATENT_DOWNSCALE};
use rffusion::config::{Config, StartMode};
use rffusion::flow::{euler_endpoint, euler_sample, SampleSchedule, Trajectory, VelocityModel};
use rffusion::guidance::{saliency_weights, Guidance, GuidanceSources, GuidanceSpec};
use rffusion::image::{rgb_ycbcr, Direction};
use rffusion::imageio::write_image;
use rffusion::synth::SynthKind;
use rffusion::{ColorSpace, Image, Tensor};

use crate::data::{self, to_channels};
use crate::models;

/// Latent guidance sources for `(other, seed)`: both encodings and the
/// saliency weight of the seed, average-pooled to the latent grid.
pub fn latent_sources(codec: &CodecParams, other: &Image, seed: &Image) -> Result<GuidanceSources> {
    let c = codec.config.channels;
    let z_i = encode(codec, &to_channels(other, c)?)?;
    let z_v = encode(codec, &to_channels(seed, c)?)?;
    let w = saliency_weights(&other.luma(), &seed.luma())?;
    let w_v = w.pooled_w_v(LATENT_DOWNSCALE, codec.config.latent_channels())?;
    Ok(GuidanceSources::new(z_i, z_v, w_v)?)
}

/// Wall-clock per phase, excluding file I/O.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTiming {
    pub encode: Duration,
    pub sample: Duration,
    pub decode: Duration,
}

impl PhaseTiming {
    pub fn total(&self) -> Duration {
        self.encode + self.sample + self.decode
    }

    pub fn add(&mut self, o: &PhaseTiming) {
        self.encode += o.encode;
        self.sample += o.sample;
        self.decode += o.decode;
    }
}

#[derive(Debug, Clone)]
pub struct Fused {
    pub image: Image,
    pub trajectory: Option<Trajectory>,
    pub timing: PhaseTiming,
}

/// Everything inference needs, resolved from a config.
#[derive(Debug, Clone)]
pub struct Fuser {
    pub codec: CodecParams,
    pub flow: VelocityModel,
    pub spec: GuidanceSpec,
    pub steps: usize,
    pub start: StartMode,
    pub kind: SynthKind,
    pub seed: u64,
}

impl Fuser {
    pub fn new(codec: CodecParams, flow: VelocityModel, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Fuser { codec, flow, spec: cfg.guidance, steps: cfg.flow.steps, start: cfg.flow.start, kind: cfg.data.kind, seed: cfg.run.seed })
    }

    /// Loads `codec.checkpoint` and, when set, `flow.checkpoint`; without a
    /// flow checkpoint the velocity is zero and only guidance moves the state.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let ck = cfg.codec.checkpoint.as_ref().context("fusion needs codec.checkpoint")?;
        let codec = models::load_codec(ck)?;
        let flow = match &cfg.flow.checkpoint {
            Some(p) => models::load_flow(p)?,
            None => VelocityModel::constant(0.0),
        };
        Fuser::new(codec, flow, cfg)
    }

    fn check_inputs(a: &Image, b: &Image) -> Result<()> {
        let ((ha, wa), (hb, wb)) = (a.dims(), b.dims());
        if (ha, wa) != (hb, wb) {
            bail!("input sizes differ: {ha}×{wa} vs {hb}×{wb}; resize B to {ha}×{wa}");
        }
        let d = LATENT_DOWNSCALE;
        if ha % d != 0 || wa % d != 0 {
            bail!("{ha}×{wa} is not divisible by {d}; resize or pad both inputs to {}×{}", ha.div_ceil(d) * d, wa.div_ceil(d) * d);
        }
        Ok(())
    }

    fn start_state(&self, src: &GuidanceSources) -> Tensor {
        match self.start {
            StartMode::Noise => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Tensor::from_fn(src.v.shape(), |_| StandardNormal.sample(&mut rng))
            }
            _ => src.v.clone(),
        }
    }

    /// Guided sampler state at `t = 0` from pre-encoded sources; the
    /// sampler-only part of [`Fuser::fuse`].
    pub fn sample(&self, src: &GuidanceSources, steps: usize) -> Result<Tensor> {
        let guide = Guidance::new(self.spec, src.clone())?;
        let sched = SampleSchedule::uniform(steps)?;
        Ok(euler_endpoint(&self.flow, &self.start_state(src), &sched, Some(&guide))?)
    }

    /// `(other, seed)` for inputs `a`, `b`.
    pub fn roles<'a>(&self, a: &'a Image, b: &'a Image) -> (&'a Image, &'a Image) {
        if data::seeds_from_a(self.start, self.kind) {
            (b, a)
        } else {
            (a, b)
        }
    }

    pub fn fuse(&self, a: &Image, b: &Image, keep_trajectory: bool) -> Result<Fused> {
        self.fuse_steps(a, b, self.steps, keep_trajectory)
    }

    pub fn fuse_steps(&self, a: &Image, b: &Image, steps: usize, keep_trajectory: bool) -> Result<Fused> {
        Self::check_inputs(a, b)?;
        let (other, seed) = self.roles(a, b);
        let t0 = Instant::now();
        let src = latent_sources(&self.codec, other, seed)?;
        let t1 = Instant::now();
        let guide = Guidance::new(self.spec, src.clone())?;
        let sched = SampleSchedule::uniform(steps)?;
        let start = self.start_state(&src);
        let (z, trajectory) = if keep_trajectory {
            let tr = euler_sample(&self.flow, &start, &sched, Some(&guide))?;
            (tr.terminal().clone(), Some(tr))
        } else {
            (euler_endpoint(&self.flow, &start, &sched, Some(&guide))?, None)
        };
        let t2 = Instant::now();
        let out = decode(&self.codec, &z)?;
        let image = recombine_chroma(&out, seed)?;
        let t3 = Instant::now();
        Ok(Fused { image, trajectory, timing: PhaseTiming { encode: t1 - t0, sample: t2 - t1, decode: t3 - t2 } })
    }
}

/// A gray fusion result takes the chroma of a color seed image.
pub fn recombine_chroma(fused: &Image, seed: &Image) -> Result<Image> {
    if !fused.is_gray() || seed.is_gray() {
        return Ok(fused.clone());
    }
    let ycc = match seed.space() {
        ColorSpace::YCbCr => seed.clone(),
        _ => rgb_ycbcr(seed, Direction::Forward)?,
    };
    let rgb = rgb_ycbcr(&ycc.with_luma(fused)?, Direction::Inverse)?;
    let data = rgb.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Image::new(rgb.height(), rgb.width(), ColorSpace::Rgb, data)?)
}

/// Latent states as `state.000`, `state.001`, ... plus one decoded PNG per
/// state under `dir`.
pub fn dump_trajectory(codec: &CodecParams, tr: &Trajectory, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut ck = Checkpoint::new();
    for (k, s) in tr.states.iter().enumerate() {
        ck.insert_real(&format!("state.{k:03}"), s.clone())?;
        write_image(&decode(codec, s)?, &dir.join(format!("state_{k:03}.png")))?;
    }
    ck.save(&dir.join("trajectory.rffz"))?;
    Ok(())
}
