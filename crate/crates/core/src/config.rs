//! Run configuration: `section.key = value` lines or `[section]` headers
//! followed by `key = value`. `#` starts a comment.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::codec::LossWeights;
use crate::error::{Error, Result};
use crate::guidance::{GradMode, GuidanceSpec, Measurement, RhoSchedule, UpdateRule, DEFAULT_EM_ITERS, DEFAULT_EM_SCALE};
use crate::synth::SynthKind;

/// Which state seeds the sampler at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    /// Source A for multi-focus, source B otherwise.
    Auto,
    A,
    B,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowData {
    /// Two-mode 2-D mixture.
    Toy2d,
    /// Codec latents of the dataset: from the seed source to the weighted
    /// fusion target.
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub steps: usize,
    pub start: StartMode,
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub data: FlowData,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecSection {
    pub channels: usize,
    pub widths: [usize; 3],
    pub weights: LossWeights,
    pub steps: usize,
    pub lr: f64,
    /// Decoder learning rate for the fusion stage.
    pub stage2_lr: f64,
    pub batch: usize,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub kind: SynthKind,
    pub count: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub runs: usize,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub flow: FlowConfig,
    pub guidance: GuidanceSpec,
    pub codec: CodecSection,
    pub data: DataConfig,
    pub run: RunConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            flow: FlowConfig {
                steps: 1,
                start: StartMode::Auto,
                hidden: vec![128, 128, 128],
                train_steps: 2000,
                lr: 3e-3,
                batch: 512,
                data: FlowData::Toy2d,
                checkpoint: None,
            },
            guidance: GuidanceSpec::default(),
            codec: CodecSection {
                channels: 1,
                widths: [32, 64, 4],
                weights: LossWeights::default(),
                steps: 500,
                lr: 1e-3,
                stage2_lr: 1e-4,
                batch: 16,
                checkpoint: None,
            },
            data: DataConfig { dir: None, kind: SynthKind::Ivif, count: 16, size: 32 },
            run: RunConfig { seed: 0, out: PathBuf::from("out") },
            bench: BenchConfig { runs: 5, steps: vec![1, 10, 50, 100] },
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        let mut em_iters = DEFAULT_EM_ITERS;
        let mut em_scale = DEFAULT_EM_SCALE;
        let mut em = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: line_no, msg };
            if let Some(rest) = line.strip_prefix('[') {
                section = rest.strip_suffix(']').ok_or_else(|| err(format!("malformed section header `{line}`")))?.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if k.contains('.') || section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            cfg.set(&key, v, &mut em, &mut em_iters, &mut em_scale).map_err(err)?;
        }
        if em {
            cfg.guidance.measurement = Measurement::EmPrior { iters: em_iters, scale: em_scale };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, em: &mut bool, iters: &mut usize, scale: &mut f64) -> std::result::Result<(), String> {
        let w = &mut self.codec.weights;
        match key {
            "flow.steps" => self.flow.steps = parse(v)?,
            "flow.start" => {
                self.flow.start = match v {
                    "auto" => StartMode::Auto,
                    "a" => StartMode::A,
                    "b" => StartMode::B,
                    "noise" => StartMode::Noise,
                    _ => return Err(format!("flow.start must be auto, a, b or noise, got `{v}`")),
                }
            }
            "flow.hidden" => self.flow.hidden = list(v)?,
            "flow.train_steps" => self.flow.train_steps = parse(v)?,
            "flow.lr" => self.flow.lr = parse(v)?,
            "flow.batch" => self.flow.batch = parse(v)?,
            "flow.data" => {
                self.flow.data = match v {
                    "toy2d" => FlowData::Toy2d,
                    "latent" => FlowData::Latent,
                    _ => return Err(format!("flow.data must be toy2d or latent, got `{v}`")),
                }
            }
            "flow.checkpoint" => self.flow.checkpoint = path(v),
            "guidance.rho" => self.guidance.rho = parse(v)?,
            "guidance.schedule" => {
                self.guidance.schedule = match v {
                    "constant" => RhoSchedule::Constant,
                    "linear_decay" => RhoSchedule::LinearDecay,
                    _ => return Err(format!("guidance.schedule must be constant or linear_decay, got `{v}`")),
                }
            }
            "guidance.measurement" => {
                *em = match v {
                    "weighted_target" => false,
                    "em_prior" => true,
                    _ => return Err(format!("guidance.measurement must be weighted_target or em_prior, got `{v}`")),
                }
            }
            "guidance.em_iters" => *iters = parse(v)?,
            "guidance.em_scale" => *scale = parse(v)?,
            "guidance.grad_mode" => {
                self.guidance.grad_mode = match v {
                    "stop_grad" => GradMode::StopGrad,
                    "full_vjp" => GradMode::FullVjp,
                    _ => return Err(format!("guidance.grad_mode must be stop_grad or full_vjp, got `{v}`")),
                }
            }
            "guidance.update" => {
                self.guidance.update = match v {
                    "semi_implicit" => UpdateRule::SemiImplicit,
                    "explicit" => UpdateRule::Explicit,
                    _ => return Err(format!("guidance.update must be semi_implicit or explicit, got `{v}`")),
                }
            }
            "codec.channels" => self.codec.channels = parse(v)?,
            "codec.widths" => {
                let l = list(v)?;
                self.codec.widths = l.try_into().map_err(|_| "codec.widths needs three values".to_string())?;
            }
            "codec.lambda_fre" => w.fre = parse(v)?,
            "codec.lambda_int" => w.int = parse(v)?,
            "codec.lambda_ssim" => w.ssim = parse(v)?,
            "codec.lambda_grad" => w.grad = parse(v)?,
            "codec.lambda_color" => w.color = parse(v)?,
            "codec.lambda_mask" => w.mask = parse(v)?,
            "codec.steps" => self.codec.steps = parse(v)?,
            "codec.lr" => self.codec.lr = parse(v)?,
            "codec.stage2_lr" => self.codec.stage2_lr = parse(v)?,
            "codec.batch" => self.codec.batch = parse(v)?,
            "codec.checkpoint" => self.codec.checkpoint = path(v),
            "data.dir" => self.data.dir = path(v),
            "data.kind" => self.data.kind = v.parse().map_err(|e: Error| e.to_string())?,
            "data.count" => self.data.count = parse(v)?,
            "data.size" => self.data.size = parse(v)?,
            "run.seed" => self.run.seed = parse(v)?,
            "run.out" => self.run.out = PathBuf::from(v),
            "bench.runs" => self.bench.runs = parse(v)?,
            "bench.steps" => self.bench.steps = list(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Config { line: 0, msg };
        self.guidance.validate().map_err(|e| bad(e.to_string()))?;
        self.codec.weights.validate().map_err(|e| bad(e.to_string()))?;
        if self.flow.steps == 0 || self.flow.batch == 0 || self.codec.batch == 0 {
            return Err(bad("flow.steps, flow.batch and codec.batch must be positive".into()));
        }
        if !(self.flow.lr > 0.0) || !(self.codec.lr > 0.0) || !(self.codec.stage2_lr > 0.0) {
            return Err(bad("learning rates must be positive".into()));
        }
        if self.data.size == 0 || !self.data.size.is_multiple_of(4) {
            return Err(bad(format!("data.size must be a positive multiple of 4, got {}", self.data.size)));
        }
        if self.bench.runs < 5 {
            return Err(bad(format!("bench.runs must be at least 5, got {}", self.bench.runs)));
        }
        if self.bench.steps.is_empty() || self.bench.steps.contains(&0) {
            return Err(bad("bench.steps must list positive step counts".into()));
        }
        Ok(())
    }

    /// Resolved configuration in the same syntax; parses back to `self`.
    pub fn to_text(&self) -> String {
        let g = &self.guidance;
        let w = &self.codec.weights;
        let mut s = String::new();
        let start = match self.flow.start {
            StartMode::Auto => "auto",
            StartMode::A => "a",
            StartMode::B => "b",
            StartMode::Noise => "noise",
        };
        let data = match self.flow.data {
            FlowData::Toy2d => "toy2d",
            FlowData::Latent => "latent",
        };
        let _ = writeln!(s, "[flow]\nsteps = {}\nstart = {start}\nhidden = {}", self.flow.steps, show_list(&self.flow.hidden));
        let _ = writeln!(s, "train_steps = {}\nlr = {:?}\nbatch = {}", self.flow.train_steps, self.flow.lr, self.flow.batch);
        let _ = writeln!(s, "data = {data}\ncheckpoint = {}\n", show_path(&self.flow.checkpoint));
        let schedule = match g.schedule {
            RhoSchedule::Constant => "constant",
            RhoSchedule::LinearDecay => "linear_decay",
        };
        let (measurement, iters, scale) = match g.measurement {
            Measurement::WeightedTarget => ("weighted_target", DEFAULT_EM_ITERS, DEFAULT_EM_SCALE),
            Measurement::EmPrior { iters, scale } => ("em_prior", iters, scale),
        };
        let grad_mode = match g.grad_mode {
            GradMode::StopGrad => "stop_grad",
            GradMode::FullVjp => "full_vjp",
        };
        let update = match g.update {
            UpdateRule::SemiImplicit => "semi_implicit",
            UpdateRule::Explicit => "explicit",
        };
        let _ = writeln!(s, "[guidance]\nrho = {:?}\nschedule = {schedule}\nmeasurement = {measurement}", g.rho);
        let _ = writeln!(s, "em_iters = {iters}\nem_scale = {scale:?}\ngrad_mode = {grad_mode}\nupdate = {update}\n");
        let _ = writeln!(s, "[codec]\nchannels = {}\nwidths = {}", self.codec.channels, show_list(&self.codec.widths));
        let _ = writeln!(
            s,
            "lambda_fre = {:?}\nlambda_int = {:?}\nlambda_ssim = {:?}\nlambda_grad = {:?}\nlambda_color = {:?}\nlambda_mask = {:?}",
            w.fre, w.int, w.ssim, w.grad, w.color, w.mask
        );
        let _ = writeln!(
            s,
            "steps = {}\nlr = {:?}\nstage2_lr = {:?}\nbatch = {}\ncheckpoint = {}\n",
            self.codec.steps,
            self.codec.lr,
            self.codec.stage2_lr,
            self.codec.batch,
            show_path(&self.codec.checkpoint)
        );
        let _ = writeln!(
            s,
            "[data]\ndir = {}\nkind = {}\ncount = {}\nsize = {}\n",
            show_path(&self.data.dir),
            self.data.kind,
            self.data.count,
            self.data.size
        );
        let _ = writeln!(s, "[run]\nseed = {}\nout = {}\n", self.run.seed, self.run.out.display());
        let _ = writeln!(s, "[bench]\nruns = {}\nsteps = {}", self.bench.runs, show_list(&self.bench.steps));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_syntaxes() {
        let a = Config::parse("flow.steps = 4\nguidance.rho = 2.5 # strong\n").unwrap();
        let b = Config::parse("[flow]\nsteps = 4\n\n[guidance]\nrho = 2.5\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.flow.steps, 4);
        assert_eq!(a.guidance.rho, 2.5);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = Config::parse("flow.steps = 1\n\nflow.stpes = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = Config::parse("[codec]\nlambda_int = x\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
    }

    #[test]
    fn resolved_text_round_trips() {
        let text = "guidance.measurement = em_prior\nguidance.em_iters = 5\ncodec.widths = 8,16,4\nflow.checkpoint = a/b.rffz\nbench.steps = 1,2\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.guidance.measurement, Measurement::EmPrior { iters: 5, scale: 0.1 });
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(Config::parse(&Config::default().to_text()).unwrap(), Config::default());
    }

    #[test]
    fn invalid_values() {
        assert!(Config::parse("guidance.rho = -1").is_err());
        assert!(Config::parse("data.size = 30").is_err());
        assert!(Config::parse("bench.runs = 3").is_err());
    }
}
