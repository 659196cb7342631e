//! Runtime and quality versus sampling step count.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::Result;
use rffusion::codec::decode;
use rffusion::guidance::GuidanceSources;
use rffusion::metrics::sf_ag;
use rffusion::synth::SynthPair;

use crate::fuse::{latent_sources, recombine_chroma, Fuser};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub steps: usize,
    pub sampler_mean: f64,
    pub sampler_std: f64,
    pub pipeline_mean: f64,
    pub pipeline_std: f64,
    pub sf: f64,
    pub ag: f64,
}

/// One timed run; seconds over the whole image set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub steps: usize,
    pub run: usize,
    pub sampler_s: f64,
    pub pipeline_s: f64,
    pub sf: f64,
    pub ag: f64,
}

/// Least-squares `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn affine_fit(x: &[f64], y: &[f64]) -> AffineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    AffineFit { slope, intercept, r2 }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub scatter: Vec<ScatterPoint>,
    /// Mean sampler time against step count.
    pub sampler_fit: AffineFit,
    pub pipeline_fit: AffineFit,
    /// Sampler time of the smallest step count over the largest.
    pub sampler_ratio: f64,
}

/// Times `runs` repetitions per step count. Sampler-only timing starts from
/// pre-encoded sources; pipeline timing covers encode, sample and decode.
pub fn run(fuser: &Fuser, pairs: &[SynthPair], steps: &[usize], runs: usize) -> Result<BenchTable> {
    let mut sources: Vec<GuidanceSources> = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (other, seed) = fuser.roles(&p.a, &p.b);
        sources.push(latent_sources(&fuser.codec, other, seed)?);
    }
    let mut rows = Vec::with_capacity(steps.len());
    let mut scatter = Vec::new();
    for &n in steps {
        // Quality does not depend on the run, so it is measured once.
        let (mut sf, mut ag) = (0.0, 0.0);
        for (p, src) in pairs.iter().zip(&sources) {
            let z = fuser.sample(src, n)?;
            let (_, seed) = fuser.roles(&p.a, &p.b);
            let img = recombine_chroma(&decode(&fuser.codec, &z)?, seed)?;
            let (s, a) = sf_ag(&img.luma())?;
            sf += s;
            ag += a;
        }
        sf /= pairs.len() as f64;
        ag /= pairs.len() as f64;
        let (mut ts, mut tp) = (Vec::with_capacity(runs), Vec::with_capacity(runs));
        for run in 0..runs {
            let t0 = Instant::now();
            for src in &sources {
                fuser.sample(src, n)?;
            }
            let sampler_s = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            for p in pairs {
                fuser.fuse_steps(&p.a, &p.b, n, false)?;
            }
            let pipeline_s = t1.elapsed().as_secs_f64();
            ts.push(sampler_s);
            tp.push(pipeline_s);
            scatter.push(ScatterPoint { steps: n, run, sampler_s, pipeline_s, sf, ag });
        }
        let (sampler_mean, sampler_std) = mean_std(&ts);
        let (pipeline_mean, pipeline_std) = mean_std(&tp);
        rows.push(BenchRow { steps: n, sampler_mean, sampler_std, pipeline_mean, pipeline_std, sf, ag });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.steps as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.sampler_mean).collect();
    let yp: Vec<f64> = rows.iter().map(|r| r.pipeline_mean).collect();
    let lo = rows.iter().min_by_key(|r| r.steps).expect("non-empty step list");
    let hi = rows.iter().max_by_key(|r| r.steps).expect("non-empty step list");
    Ok(BenchTable {
        sampler_fit: affine_fit(&x, &ys),
        pipeline_fit: affine_fit(&x, &yp),
        sampler_ratio: lo.sampler_mean / hi.sampler_mean,
        rows,
        scatter,
    })
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("steps,sampler_mean_s,sampler_std_s,pipeline_mean_s,pipeline_std_s,SF,AG\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6},{:.6}",
                r.steps, r.sampler_mean, r.sampler_std, r.pipeline_mean, r.pipeline_std, r.sf, r.ag
            );
        }
        s
    }

    /// Runtime against SF and AG, one line per timed run.
    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("steps,run,sampler_s,pipeline_s,SF,AG\n");
        for p in &self.scatter {
            let _ = writeln!(s, "{},{},{:.6e},{:.6e},{:.6},{:.6}", p.steps, p.run, p.sampler_s, p.pipeline_s, p.sf, p.ag);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let f = affine_fit(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
