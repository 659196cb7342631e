//! Training drivers for the velocity model and both codec stages.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rffusion::autodiff::{AdamConfig, AdamState, ParamSet};
use rffusion::codec::{stage1_step, stage2_step, CodecConfig, CodecParams, Freeze};
use rffusion::config::{Config, FlowData};
use rffusion::flow::{sample_noise_and_times, train_step, VelocityModel};
use rffusion::synth::two_mode_mixture;
use rffusion::{Image, Tensor};

use crate::data::{self, check_overwrite};
use crate::fuse::latent_sources;
use crate::models;

/// Checkpoints are refreshed this often during a run.
pub const CHECKPOINT_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Flow,
    Codec1,
    Codec2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Flow => "flow",
            Stage::Codec1 => "codec1",
            Stage::Codec2 => "codec2",
        }
    }

    pub fn checkpoint_path(self, out: &Path) -> PathBuf {
        out.join(format!("{}.rffz", self.name()))
    }

    pub fn log_path(self, out: &Path) -> PathBuf {
        out.join(format!("{}_loss.csv", self.name()))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stage: Stage,
    /// First step executed by this run; nonzero when resumed.
    pub start_step: usize,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainReport {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

struct LossLog {
    w: BufWriter<File>,
    t0: Instant,
}

impl LossLog {
    /// A resumed run appends to an existing log.
    fn open(path: &Path, columns: &[&str], append: bool) -> Result<Self> {
        data::ensure_parent(path)?;
        let existing = append && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(existing)
            .truncate(!existing)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let mut w = BufWriter::new(file);
        if !existing {
            writeln!(w, "step,{},lr,wall_s", columns.join(","))?;
        }
        Ok(LossLog { w, t0: Instant::now() })
    }

    fn row(&mut self, step: usize, values: &[f64], lr: f64) -> Result<()> {
        let vals: Vec<String> = values.iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(self.w, "{step},{},{lr:.6e},{:.4}", vals.join(","), self.t0.elapsed().as_secs_f64())?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// `lr0·(1 + cos(π·step/steps))/2`.
pub fn cosine_lr(lr0: f64, step: usize, steps: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos())
}

/// Generator for one training step, independent of where a run resumed.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Generic loop: `step_fn` returns the component losses, total first.
/// A failing step saves the last finite state before the error propagates.
fn run_loop<M>(
    model: &mut M,
    range: std::ops::Range<usize>,
    log: &mut LossLog,
    lr_at: impl Fn(usize) -> f64,
    mut step_fn: impl FnMut(&mut M, usize, f64) -> rffusion::Result<Vec<f64>>,
    mut save: impl FnMut(&M) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(range.len());
    for step in range {
        let lr = lr_at(step);
        match step_fn(model, step, lr) {
            Ok(vals) => {
                log.row(step, &vals, lr)?;
                losses.push(vals[0]);
            }
            Err(e) => {
                save(model)?;
                log.w.flush()?;
                return Err(anyhow::Error::new(e).context(format!("training aborted at step {step}; last finite checkpoint kept")));
            }
        }
        if (step + 1) % CHECKPOINT_EVERY == 0 {
            save(model)?;
        }
    }
    save(model)?;
    Ok(losses)
}

fn prepare(stage: Stage, out: &Path, force: bool, resuming: bool) -> Result<(PathBuf, PathBuf)> {
    let ck = stage.checkpoint_path(out);
    let log = stage.log_path(out);
    if !resuming {
        check_overwrite(&ck, force)?;
    }
    check_overwrite(&log, force || resuming)?;
    Ok((ck, log))
}

pub fn train(stage: Stage, cfg: &Config, out: &Path, resume: Option<&Path>, force: bool) -> Result<TrainReport> {
    match stage {
        Stage::Flow => train_flow(cfg, out, resume, force),
        Stage::Codec1 => train_codec1(cfg, out, resume, force),
        Stage::Codec2 => train_codec2(cfg, out, resume, force),
    }
}

/// Flow training data as `(x0, ε)` rows: latent pairs run from the fusion
/// target at `t = 0` to the seed latent at `t = 1`.
fn latent_rows(cfg: &Config) -> Result<(Tensor, Tensor)> {
    let ck = cfg.codec.checkpoint.as_ref().context("flow.data = latent needs codec.checkpoint")?;
    let codec = models::load_codec(ck)?;
    let pairs = data::dataset(cfg)?;
    let (mut x0, mut eps) = (Vec::new(), Vec::new());
    let mut dim = 0;
    for p in &pairs {
        let (other, seed) = data::roles(cfg, &p.a, &p.b);
        let src = latent_sources(&codec, &other, &seed)?;
        dim = src.v.numel();
        x0.extend_from_slice(src.blend().data());
        eps.extend_from_slice(src.v.data());
    }
    let n = pairs.len();
    Ok((Tensor::new(vec![n, dim], x0)?, Tensor::new(vec![n, dim], eps)?))
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], out).expect("row gather")
}

fn train_flow(cfg: &Config, out: &Path, resume: Option<&Path>, force: bool) -> Result<TrainReport> {
    let fc = &cfg.flow;
    let latent = match fc.data {
        FlowData::Toy2d => None,
        FlowData::Latent => Some(latent_rows(cfg)?),
    };
    let dim = latent.as_ref().map_or(2, |(x0, _)| x0.shape()[1]);
    let mut model = match resume {
        Some(p) => models::load_flow(p)?,
        None => VelocityModel::mlp(dim, &fc.hidden, &mut init_rng(cfg.run.seed)),
    };
    if model.dim() != Some(dim) {
        bail!("flow checkpoint dimension {:?} does not match the data dimension {dim}", model.dim());
    }
    let start = model.params().state_step();
    let (ck, log_path) = prepare(Stage::Flow, out, force, resume.is_some())?;
    let mut log = LossLog::open(&log_path, &["rf"], resume.is_some())?;
    let (steps, lr0, batch, seed) = (fc.train_steps, fc.lr, fc.batch, cfg.run.seed);
    let losses = run_loop(
        &mut model,
        start..steps,
        &mut log,
        |s| cosine_lr(lr0, s, steps),
        |m, step, lr| {
            let mut rng = step_rng(seed, step);
            let (x0, eps, t) = match &latent {
                None => {
                    let x0 = two_mode_mixture(batch, &mut rng);
                    let (eps, t) = sample_noise_and_times(batch, 2, &mut rng);
                    (x0, eps, t)
                }
                Some((x0_all, eps_all)) => {
                    let n = x0_all.shape()[0];
                    let idx: Vec<usize> = (0..batch).map(|_| rand::Rng::random_range(&mut rng, 0..n)).collect();
                    let (_, t) = sample_noise_and_times(batch, 1, &mut rng);
                    (gather_rows(x0_all, &idx), gather_rows(eps_all, &idx), t)
                }
            };
            Ok(vec![train_step(m, &x0, &eps, &t, AdamConfig::with_lr(lr))?])
        },
        |m| models::save_flow(m, &ck),
    )?;
    log.finish()?;
    Ok(TrainReport { stage: Stage::Flow, start_step: start, losses, checkpoint: ck, log: log_path })
}

/// Indices of minibatch `step` over `n` items: a fresh permutation prefix
/// when `batch < n`, everything otherwise.
fn minibatch(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut idx = index::sample(&mut step_rng(seed, step), n, batch).into_vec();
    idx.sort_unstable();
    idx
}

fn codec_images(cfg: &Config, channels: usize) -> Result<Vec<Image>> {
    let mut imgs = Vec::new();
    for p in data::dataset(cfg)? {
        imgs.push(data::to_channels(&p.a, channels)?);
        imgs.push(data::to_channels(&p.b, channels)?);
    }
    Ok(imgs)
}

fn train_codec1(cfg: &Config, out: &Path, resume: Option<&Path>, force: bool) -> Result<TrainReport> {
    let cc = &cfg.codec;
    let mut codec = match resume {
        Some(p) => models::load_codec(p)?,
        None => {
            CodecParams::init(CodecConfig { channels: cc.channels, widths: cc.widths, ..Default::default() }, &mut init_rng(cfg.run.seed))?
        }
    };
    if codec.freeze != Freeze::None {
        bail!("stage I cannot resume from a stage II checkpoint");
    }
    let imgs = codec_images(cfg, codec.config.channels)?;
    let start = codec.decoder_steps() as usize;
    let (ck, log_path) = prepare(Stage::Codec1, out, force, resume.is_some())?;
    let mut log = LossLog::open(&log_path, &["total", "rec", "fre"], resume.is_some())?;
    let (w, batch, seed) = (cc.weights, cc.batch, cfg.run.seed);
    let losses = run_loop(
        &mut codec,
        start..cc.steps,
        &mut log,
        |_| cc.lr,
        |p, step, lr| {
            let b: Vec<Image> = minibatch(imgs.len(), batch, seed, step).into_iter().map(|i| imgs[i].clone()).collect();
            let l = stage1_step(p, &b, &w, AdamConfig::with_lr(lr))?;
            Ok(vec![l.total, l.rec, l.fre])
        },
        |p| models::save_codec(p, &ck),
    )?;
    log.finish()?;
    Ok(TrainReport { stage: Stage::Codec1, start_step: start, losses, checkpoint: ck, log: log_path })
}

/// Stage II starts the decoder with fresh Adam moments.
fn reset_optimizer(p: &mut ParamSet) -> Result<()> {
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for n in names {
        let shape = p.get(&n).expect("listed").shape().to_vec();
        p.set_state(&n, AdamState { m: Tensor::zeros(&shape), v: Tensor::zeros(&shape), step: 0 })?;
    }
    Ok(())
}

fn train_codec2(cfg: &Config, out: &Path, resume: Option<&Path>, force: bool) -> Result<TrainReport> {
    let cc = &cfg.codec;
    let mut codec = match resume {
        Some(p) => {
            let c = models::load_codec(p)?;
            if c.freeze != Freeze::Encoder {
                bail!("{} is not a stage II checkpoint", p.display());
            }
            c
        }
        None => {
            let base = cc.checkpoint.as_ref().context("codec2 needs codec.checkpoint pointing at a codec1 checkpoint")?;
            let mut c = models::load_codec(base)?;
            if c.freeze != Freeze::None {
                bail!("{} is already a stage II checkpoint", base.display());
            }
            c.freeze = Freeze::Encoder;
            reset_optimizer(&mut c.decoder)?;
            c
        }
    };
    let start = codec.decoder_steps() as usize;
    let channels = codec.config.channels;
    let mut pairs = Vec::new();
    for p in data::dataset(cfg)? {
        let (other, seed) = data::roles(cfg, &p.a, &p.b);
        pairs.push((data::to_channels(&other, 1)?, data::to_channels(&seed, channels)?));
    }
    let (ck, log_path) = prepare(Stage::Codec2, out, force, resume.is_some())?;
    let mut log = LossLog::open(&log_path, &["total", "int", "ssim", "grad", "color", "mask"], resume.is_some())?;
    let (w, batch, seed) = (cc.weights, cc.batch, cfg.run.seed);
    let losses = run_loop(
        &mut codec,
        start..cc.steps,
        &mut log,
        |_| cc.stage2_lr,
        |p, step, lr| {
            let b: Vec<(Image, Image)> = minibatch(pairs.len(), batch, seed, step).into_iter().map(|i| pairs[i].clone()).collect();
            let l = stage2_step(p, &b, None, &w, AdamConfig::with_lr(lr))?;
            let c = l.components;
            Ok(vec![l.total, c.int, c.ssim, c.grad, c.color, c.mask])
        },
        |p| models::save_codec(p, &ck),
    )?;
    log.finish()?;
    Ok(TrainReport { stage: Stage::Codec2, start_step: start, losses, checkpoint: ck, log: log_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn minibatches() {
        assert_eq!(minibatch(4, 8, 0, 3), vec![0, 1, 2, 3]);
        let b = minibatch(10, 4, 7, 2);
        assert_eq!(b.len(), 4);
        assert_eq!(b, minibatch(10, 4, 7, 2));
        assert!(b.windows(2).all(|w| w[0] < w[1]));
    }
}
