//! Command-line driver for `rffusion`.
//!
//! Verbs: `synth`, `train`, `fuse`, `eval` and `bench`. Each resolves the
//! configuration file plus command-line overrides and writes the resolved
//! text next to its outputs as `<verb>.config.txt`.

pub mod bench;
pub mod data;
pub mod eval;
pub mod fuse;
pub mod models;
pub mod train;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rffusion::config::Config;
use rffusion::imageio::{read_image, write_image};
use rffusion::synth::{self, SynthKind};

use crate::data::{check_overwrite, is_nonempty_dir};
use crate::fuse::{dump_trajectory, Fuser, PhaseTiming};
use crate::train::Stage;

#[derive(Debug, Parser)]
#[command(name = "rffuse", version, about = "One-step rectified-flow image fusion")]
pub struct Cli {
    /// Configuration file (`key = value` lines, optional `[section]` headers).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory or over existing files.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Flow,
    Codec1,
    Codec2,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Flow => Stage::Flow,
            StageArg::Codec1 => Stage::Codec1,
            StageArg::Codec2 => Stage::Codec2,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired synthetic dataset under `<out>/A` and `<out>/B`.
    Synth {
        /// ivif, mef or mff; overrides `data.kind`.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        /// Side length in pixels, a multiple of 4.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the velocity model or one codec stage.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        /// Continue from a checkpoint written by the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fuse one pair of images, or every matching name in two directories.
    Fuse {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Overrides `codec.checkpoint`.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Overrides `flow.checkpoint`.
        #[arg(long)]
        flow: Option<PathBuf>,
        /// Overrides `flow.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides `guidance.rho`.
        #[arg(long)]
        rho: Option<f64>,
        /// Output file for single-pair mode; defaults to `<out>/fused.png`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write every sampler state under `<out>/trajectory`.
        #[arg(long)]
        trajectory: bool,
    },
    /// Metric table for aligned fused and source directories.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Runtime and SF/AG against sampling step count.
    Bench {
        /// Comma-separated step counts; overrides `bench.steps`.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        /// Overrides `bench.runs` (at least 5).
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        flow: Option<PathBuf>,
    },
}

fn base_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.run.out = o.clone();
    }
    Ok(cfg)
}

fn log_config(cfg: &Config, verb: &str) -> Result<()> {
    fs::create_dir_all(&cfg.run.out).with_context(|| format!("creating {}", cfg.run.out.display()))?;
    fs::write(cfg.run.out.join(format!("{verb}.config.txt")), cfg.to_text())?;
    Ok(())
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn print_timing(t: &PhaseTiming, n: usize) {
    println!(
        "timing over {n} pair(s): encode {:.3} ms, sample {:.3} ms, decode {:.3} ms, total {:.3} ms",
        ms(t.encode),
        ms(t.sample),
        ms(t.decode),
        ms(t.total())
    );
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    let force = cli.force;
    match cli.command {
        Command::Synth { kind, count, size } => {
            if let Some(k) = kind {
                cfg.data.kind = k.parse::<SynthKind>()?;
            }
            cfg.data.count = count.unwrap_or(cfg.data.count);
            cfg.data.size = size.unwrap_or(cfg.data.size);
            cfg.validate()?;
            let out = cfg.run.out.clone();
            if is_nonempty_dir(&out) && !force {
                bail!("{} is not empty; pass --force to write into it", out.display());
            }
            let pairs = synth::generate(cfg.data.kind, cfg.data.count, cfg.data.size, cfg.run.seed)?;
            data::write_pairs(&out, &pairs)?;
            log_config(&cfg, "synth")?;
            println!("wrote {} {} pairs of {}×{} to {}", pairs.len(), cfg.data.kind, cfg.data.size, cfg.data.size, out.display());
        }
        Command::Train { stage, resume } => {
            cfg.validate()?;
            let stage = Stage::from(stage);
            log_config(&cfg, &format!("train_{}", stage.name()))?;
            let r = train::train(stage, &cfg, &cfg.run.out, resume.as_deref(), force)?;
            println!(
                "{}: steps {}..{} loss {:.6} -> {:.6}; checkpoint {}, log {}",
                stage.name(),
                r.start_step,
                r.start_step + r.losses.len(),
                r.first().unwrap_or(f64::NAN),
                r.last().unwrap_or(f64::NAN),
                r.checkpoint.display(),
                r.log.display()
            );
        }
        Command::Fuse { a, b, codec, flow, steps, rho, output, trajectory } => {
            if codec.is_some() {
                cfg.codec.checkpoint = codec;
            }
            if flow.is_some() {
                cfg.flow.checkpoint = flow;
            }
            cfg.flow.steps = steps.unwrap_or(cfg.flow.steps);
            cfg.guidance.rho = rho.unwrap_or(cfg.guidance.rho);
            let fuser = Fuser::from_config(&cfg)?;
            log_config(&cfg, "fuse")?;
            fuse_command(&fuser, &cfg.run.out, &a, &b, output.as_deref(), trajectory, force)?;
        }
        Command::Eval { fused, a, b } => {
            cfg.validate()?;
            let out = cfg.run.out.clone();
            let (csv, json) = (out.join("metrics.csv"), out.join("metrics.json"));
            check_overwrite(&csv, force)?;
            check_overwrite(&json, force)?;
            let table = eval::evaluate(&cfg, &fused, &a, &b)?;
            log_config(&cfg, "eval")?;
            fs::write(&csv, table.to_csv())?;
            fs::write(&json, serde_json::to_string_pretty(&table.to_json()?)?)?;
            for m in &table.missing {
                eprintln!("missing counterpart: {m}");
            }
            if let Some(m) = &table.mean {
                println!("mean over {} triple(s): MI {:.4} SSIM {:.4} VIF {:.4} Qcb {:.4}", table.rows.len(), m.mi, m.ssim, m.vif, m.qcb);
            }
            println!("wrote {} and {}", csv.display(), json.display());
        }
        Command::Bench { steps, runs, codec, flow } => {
            if let Some(s) = steps {
                cfg.bench.steps = s;
            }
            cfg.bench.runs = runs.unwrap_or(cfg.bench.runs);
            if codec.is_some() {
                cfg.codec.checkpoint = codec;
            }
            if flow.is_some() {
                cfg.flow.checkpoint = flow;
            }
            let fuser = Fuser::from_config(&cfg)?;
            let out = cfg.run.out.clone();
            let (csv, scatter) = (out.join("bench.csv"), out.join("bench_scatter.csv"));
            check_overwrite(&csv, force)?;
            check_overwrite(&scatter, force)?;
            let pairs = data::dataset(&cfg)?;
            let table = bench::run(&fuser, &pairs, &cfg.bench.steps, cfg.bench.runs)?;
            log_config(&cfg, "bench")?;
            fs::write(&csv, table.to_csv())?;
            fs::write(&scatter, table.scatter_csv())?;
            for r in &table.rows {
                println!(
                    "steps {:>4}: sampler {:.3} ± {:.3} ms, pipeline {:.3} ± {:.3} ms, SF {:.4}, AG {:.4}",
                    r.steps,
                    r.sampler_mean * 1e3,
                    r.sampler_std * 1e3,
                    r.pipeline_mean * 1e3,
                    r.pipeline_std * 1e3,
                    r.sf,
                    r.ag
                );
            }
            let f = table.sampler_fit;
            println!(
                "sampler fit: {:.4} ms + {:.4} ms/step, R² {:.5}; smallest/largest step-count time ratio {:.4}",
                f.intercept * 1e3,
                f.slope * 1e3,
                f.r2,
                table.sampler_ratio
            );
        }
    }
    Ok(())
}

fn fuse_command(fuser: &Fuser, out: &Path, a: &Path, b: &Path, output: Option<&Path>, trajectory: bool, force: bool) -> Result<()> {
    let mut jobs = Vec::new();
    if a.is_dir() {
        if !b.is_dir() {
            bail!("--a is a directory but --b is not");
        }
        let nb = data::image_names(b)?;
        for name in data::image_names(a)? {
            if nb.contains(&name) {
                let stem = Path::new(&name).with_extension("png");
                jobs.push((
                    a.join(&name),
                    b.join(&name),
                    out.join("fused").join(&stem),
                    out.join("trajectory").join(stem.with_extension("")),
                ));
            } else {
                eprintln!("missing counterpart: B/{name}");
            }
        }
        if jobs.is_empty() {
            bail!("no matching image names in {} and {}", a.display(), b.display());
        }
    } else {
        let dest = output.map(Path::to_path_buf).unwrap_or_else(|| out.join("fused.png"));
        jobs.push((a.to_path_buf(), b.to_path_buf(), dest, out.join("trajectory")));
    }
    let mut total = PhaseTiming::default();
    for (pa, pb, dest, tdir) in &jobs {
        check_overwrite(dest, force)?;
        let ia = read_image(pa).with_context(|| format!("reading {}", pa.display()))?;
        let ib = read_image(pb).with_context(|| format!("reading {}", pb.display()))?;
        let fused = fuser.fuse(&ia, &ib, trajectory).with_context(|| format!("fusing {}", pa.display()))?;
        data::ensure_parent(dest)?;
        write_image(&fused.image, dest)?;
        if let Some(tr) = &fused.trajectory {
            dump_trajectory(&fuser.codec, tr, tdir)?;
        }
        total.add(&fused.timing);
    }
    print_timing(&total, jobs.len());
    Ok(())
}
