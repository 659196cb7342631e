//! Rectified flow: straight-path interpolation, the velocity regression
//! loss and the deterministic Euler sampler.
//!
//! Time runs from `t = 1` (start state) to `t = 0` (data). A path is
//! `x_t = (1 - t)·x0 + t·ε` with constant velocity `ε - x0`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{adam_step, AdamConfig, BoundParams, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

fn check_unit(t: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::InvalidArgument(format!("{what}: t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - t)·x0 + t·eps`.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t, "interpolate")?;
    x0.zip_map(eps, "interpolate", |a, b| (1.0 - t) * a + t * b)
}

/// `eps - x0`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(x0)
}

/// Clean-endpoint estimate `f_t - t·v` recovered from a straight path.
pub fn estimate_f0(f_t: &Tensor, vhat: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t, "estimate_f0")?;
    f_t.zip_map(vhat, "estimate_f0", |f, v| f - t * v)
}

/// Closed-form `E[ε - x0 | x_t = x]` for `x0 ~ N(μ0, σ0²)` and `ε ~ N(0, 1)`
/// independent, applied elementwise.
pub fn analytic_gaussian_velocity(mu0: f64, sigma0: f64, x: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t, "analytic_gaussian_velocity")?;
    if !(sigma0 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma0 must be positive, got {sigma0}")));
    }
    let (a, b) = gaussian_coeffs(mu0, sigma0, t);
    Ok(x.map(|v| a * v + b))
}

/// Velocity of the Gaussian flow as `a·x + b`.
fn gaussian_coeffs(mu0: f64, sigma0: f64, t: f64) -> (f64, f64) {
    let s0 = sigma0 * sigma0;
    let m = (1.0 - t) * mu0;
    let s2 = (1.0 - t) * (1.0 - t) * s0 + t * t;
    let ce = t / s2;
    let cx = (1.0 - t) * s0 / s2;
    // v = ce·(x - m) - (μ0 + cx·(x - m))
    let a = ce - cx;
    (a, -a * m - mu0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum VelocityKind {
    /// Fully connected network over `[x, t]`; `widths[0]` includes the time
    /// feature and `widths.last()` is the data dimension.
    Mlp {
        widths: Vec<usize>,
        slope: f64,
    },
    AnalyticGaussian {
        mu0: f64,
        sigma0: f64,
    },
    Constant(f64),
}

/// A velocity field `v(x, t)` whose output has the shape of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    kind: VelocityKind,
    params: ParamSet,
}

pub const MLP_SLOPE: f64 = 0.2;

impl VelocityModel {
    pub fn constant(c: f64) -> Self {
        VelocityModel { kind: VelocityKind::Constant(c), params: ParamSet::new() }
    }

    pub fn analytic_gaussian(mu0: f64, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma0 must be positive, got {sigma0}")));
        }
        Ok(VelocityModel { kind: VelocityKind::AnalyticGaussian { mu0, sigma0 }, params: ParamSet::new() })
    }

    /// MLP with hidden layers `hidden` for `dim`-dimensional data. Weights are
    /// He-normal, biases zero.
    pub fn mlp(dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut widths = vec![dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut params = ParamSet::new();
        for (i, w) in widths.windows(2).enumerate() {
            let std = (2.0 / w[0] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let weight = Tensor::from_fn(&[w[0], w[1]], |_| normal.sample(rng));
            params.insert(&format!("mlp.{i}.weight"), weight).expect("unique");
            params.insert(&format!("mlp.{i}.bias"), Tensor::zeros(&[w[1]])).expect("unique");
        }
        VelocityModel { kind: VelocityKind::Mlp { widths, slope: MLP_SLOPE }, params }
    }

    /// Rebuilds an MLP from `mlp.{i}.weight` / `mlp.{i}.bias` tensors.
    pub fn mlp_from_params(params: ParamSet) -> Result<Self> {
        let mut widths = Vec::new();
        let mut i = 0;
        while let Some(w) = params.get(&format!("mlp.{i}.weight")) {
            let b = params.get(&format!("mlp.{i}.bias")).ok_or_else(|| Error::InvalidArgument(format!("missing mlp.{i}.bias")))?;
            if w.rank() != 2 || b.numel() != w.shape()[1] {
                return Err(Error::InvalidArgument(format!("layer {i} has inconsistent shapes")));
            }
            if widths.is_empty() {
                widths.push(w.shape()[0]);
            } else if *widths.last().unwrap() != w.shape()[0] {
                return Err(Error::InvalidArgument(format!("layer {i} input width mismatch")));
            }
            widths.push(w.shape()[1]);
            i += 1;
        }
        if widths.len() < 2 || widths[0] != widths[widths.len() - 1] + 1 {
            return Err(Error::InvalidArgument("not a velocity MLP parameter set".into()));
        }
        Ok(VelocityModel { kind: VelocityKind::Mlp { widths, slope: MLP_SLOPE }, params })
    }

    pub fn kind(&self) -> &VelocityKind {
        &self.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Data dimension of an MLP model; `None` for elementwise models.
    pub fn dim(&self) -> Option<usize> {
        match &self.kind {
            VelocityKind::Mlp { widths, .. } => widths.last().copied(),
            _ => None,
        }
    }

    pub(crate) fn rows(&self, numel: usize) -> Result<usize> {
        match self.dim() {
            None => Ok(1),
            Some(d) if numel.is_multiple_of(d) => Ok(numel / d),
            Some(d) => {
                Err(Error::InvalidShape { op: "velocity", msg: format!("{numel} elements is not a multiple of the model dimension {d}") })
            }
        }
    }

    /// Adds `v(x, t)` to `g`. `x` is `[B, D]` for MLPs; `t` holds one time
    /// per row.
    pub fn build(&self, g: &mut Graph, bound: &BoundParams, x: NodeId, t: &[f64]) -> Result<NodeId> {
        match &self.kind {
            VelocityKind::Constant(c) => {
                let shape = g.shape(x).to_vec();
                Ok(g.constant(Tensor::full(&shape, *c)))
            }
            VelocityKind::AnalyticGaussian { mu0, sigma0 } => {
                let shape = g.shape(x).to_vec();
                let per_row = shape.iter().product::<usize>() / t.len().max(1);
                let mut a = Vec::with_capacity(per_row * t.len());
                let mut b = Vec::with_capacity(per_row * t.len());
                for &ti in t {
                    check_unit(ti, "analytic velocity")?;
                    let (ai, bi) = gaussian_coeffs(*mu0, *sigma0, ti);
                    a.extend(std::iter::repeat_n(ai, per_row));
                    b.extend(std::iter::repeat_n(bi, per_row));
                }
                let a = g.constant(Tensor::new(shape.clone(), a)?);
                let b = g.constant(Tensor::new(shape, b)?);
                let ax = g.mul(x, a)?;
                g.add(ax, b)
            }
            VelocityKind::Mlp { widths, slope } => {
                let rows = g.shape(x)[0];
                if t.len() != rows {
                    return Err(Error::InvalidArgument(format!("{} times for {rows} rows", t.len())));
                }
                let tcol = g.constant(Tensor::new(vec![rows, 1], t.to_vec())?);
                let mut h = g.concat_cols(x, tcol)?;
                let layers = widths.len() - 1;
                for i in 0..layers {
                    let w = bound.id(&format!("mlp.{i}.weight"));
                    let b = bound.id(&format!("mlp.{i}.bias"));
                    h = g.matmul(h, w)?;
                    h = g.add_bias(h, b)?;
                    if i + 1 < layers {
                        h = g.leaky_relu(h, *slope)?;
                    }
                }
                Ok(h)
            }
        }
    }

    /// Evaluates `v(x, t)` for a tensor of any shape (rows of `D` for MLPs).
    pub fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        check_unit(t, "velocity")?;
        match &self.kind {
            VelocityKind::Constant(c) => Ok(Tensor::full(x.shape(), *c)),
            VelocityKind::AnalyticGaussian { mu0, sigma0 } => analytic_gaussian_velocity(*mu0, *sigma0, x, t),
            VelocityKind::Mlp { .. } => {
                let rows = self.rows(x.numel())?;
                let d = x.numel() / rows;
                let mut g = Graph::with_exec(Exec::Sequential);
                let bound = self.params.bind(&mut g);
                let xin = g.leaf(x.reshape(&[rows, d])?);
                let v = self.build(&mut g, &bound, xin, &vec![t; rows])?;
                g.value(v).reshape(x.shape())
            }
        }
    }
}

/// Result of one loss evaluation with parameter gradients.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Builds the rectified-flow regression loss `mean((v(x_t, t) - (ε - x0))²)`
/// for `[B, D]` batches. Returns `(graph, params, loss node)`.
pub fn rf_loss_graph(m: &VelocityModel, x0: &Tensor, eps: &Tensor, t: &[f64]) -> Result<(Graph, BoundParams, NodeId)> {
    x0.same_shape(eps, "rf_loss")?;
    let rows = if x0.rank() == 2 { x0.shape()[0] } else { 1 };
    if t.len() != rows {
        return Err(Error::InvalidArgument(format!("{} times for a batch of {rows}", t.len())));
    }
    if let Some(&bad) = t.iter().find(|&&ti| !(0.0..1.0).contains(&ti)) {
        return Err(Error::InvalidArgument(format!("rf_loss: t = {bad} outside [0, 1)")));
    }
    let d = x0.numel() / rows;
    let mut xt = Vec::with_capacity(x0.numel());
    for r in 0..rows {
        for j in 0..d {
            let k = r * d + j;
            xt.push((1.0 - t[r]) * x0.data()[k] + t[r] * eps.data()[k]);
        }
    }
    let target = velocity_target(x0, eps)?.reshape(&[rows, d])?;
    let mut g = Graph::new();
    let bound = m.params.bind(&mut g);
    let x = g.leaf(Tensor::new(vec![rows, d], xt)?);
    let v = m.build(&mut g, &bound, x, t)?;
    let tgt = g.constant(target);
    let r = g.sub(v, tgt)?;
    let sq = g.square(r)?;
    let loss = g.mean(sq)?;
    Ok((g, bound, loss))
}

/// Rectified-flow loss and its parameter gradients.
pub fn rf_loss(m: &VelocityModel, x0: &Tensor, eps: &Tensor, t: &[f64]) -> Result<LossEval> {
    let (g, bound, loss) = rf_loss_graph(m, x0, eps, t)?;
    let grads = g.backward(loss, &bound.ids())?;
    Ok(LossEval { loss: g.value(loss).item(), grads: bound.collect(&grads, |_| true) })
}

/// One Adam step on the rectified-flow loss; returns the loss before the
/// update.
pub fn train_step(m: &mut VelocityModel, x0: &Tensor, eps: &Tensor, t: &[f64], adam: AdamConfig) -> Result<f64> {
    let l = rf_loss(m, x0, eps, t)?;
    if !l.loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: m.params.state_step(), breakdown: format!("rf={}", l.loss) });
    }
    adam_step(&mut m.params, &l.grads, adam)?;
    Ok(l.loss)
}

/// Upper end of the training time distribution, keeping clear of `t = 1`.
pub const T_MAX_TRAIN: f64 = 1.0 - 1e-3;

/// Draws a training batch: `ε ~ N(0, 1)` and `t ~ U[0, 1 - 1e-3]`.
pub fn sample_noise_and_times(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<f64>) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let eps = Tensor::from_fn(&[rows, dim], |_| normal.sample(rng));
    let t = (0..rows).map(|_| rng.random::<f64>() * T_MAX_TRAIN).collect();
    (eps, t)
}

/// Strictly decreasing time grid from 1 to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSchedule {
    grid: Vec<f64>,
}

impl SampleSchedule {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("sampling needs at least one step".into()));
        }
        let grid = (0..=steps)
            .map(|k| {
                let j = steps - k;
                if j == steps {
                    1.0
                } else {
                    j as f64 / steps as f64
                }
            })
            .collect();
        Ok(SampleSchedule { grid })
    }

    pub fn custom(grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid[0] != 1.0 || *grid.last().unwrap() != 0.0 {
            return Err(Error::InvalidArgument("grid must start at 1 and end at 0".into()));
        }
        if grid.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidArgument("grid must be strictly decreasing".into()));
        }
        Ok(SampleSchedule { grid })
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
}

/// Replaces the model velocity during sampling (e.g. fusion guidance).
pub trait VelocityField: Sync {
    /// Effective velocity at `(f_t, t)` for a step of size `dt`.
    fn velocity(&self, model: &VelocityModel, f_t: &Tensor, t: f64, dt: f64) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn terminal(&self) -> &Tensor {
        self.states.last().expect("trajectory has at least one state")
    }
}

fn euler_core(
    m: &VelocityModel,
    f_start: &Tensor,
    sched: &SampleSchedule,
    guidance: Option<&dyn VelocityField>,
    mut keep: impl FnMut(&Tensor),
) -> Result<Tensor> {
    if let Some(d) = m.dim() {
        if !f_start.numel().is_multiple_of(d) {
            return Err(Error::InvalidShape {
                op: "euler_sample",
                msg: format!("start has {} elements, model dimension is {d}", f_start.numel()),
            });
        }
    }
    let mut f = f_start.clone();
    for (step, w) in sched.grid.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let dt = t - t_next;
        let v = match guidance {
            Some(gf) => gf.velocity(m, &f, t, dt)?,
            None => m.eval(&f, t)?,
        };
        f.axpy(-dt, &v)?;
        if !f.all_finite() {
            return Err(Error::Diverged { step });
        }
        keep(&f);
    }
    Ok(f)
}

/// Deterministic Euler integration `f_{t-Δt} = f_t - Δt·v(f_t, t)` from
/// `t = 1` to `t = 0`. The trajectory holds `steps + 1` states.
pub fn euler_sample(
    m: &VelocityModel,
    f_start: &Tensor,
    sched: &SampleSchedule,
    guidance: Option<&dyn VelocityField>,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(sched.steps() + 1);
    states.push(f_start.clone());
    euler_core(m, f_start, sched, guidance, |f| states.push(f.clone()))?;
    Ok(Trajectory { states })
}

/// [`euler_sample`] without keeping intermediate states.
pub fn euler_endpoint(m: &VelocityModel, f_start: &Tensor, sched: &SampleSchedule, guidance: Option<&dyn VelocityField>) -> Result<Tensor> {
    euler_core(m, f_start, sched, guidance, |_| {})
}

/// Samples independent starts, in parallel under [`Exec::Parallel`].
pub fn euler_endpoint_batch(
    exec: Exec,
    m: &VelocityModel,
    starts: &[Tensor],
    sched: &SampleSchedule,
    guidance: Option<&dyn VelocityField>,
) -> Vec<Result<Tensor>> {
    par::map_range(exec, starts.len(), |i| euler_endpoint(m, &starts[i], sched, guidance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn interpolation_endpoints() {
        let x0 = Tensor::from_fn(&[3], |i| i as f64);
        let eps = Tensor::from_fn(&[3], |i| -(i as f64) - 1.0);
        assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), eps);
        let mid = interpolate(&Tensor::scalar(0.0), &Tensor::scalar(2.0), 0.5).unwrap();
        assert_eq!(mid.item(), 1.0);
        assert!(interpolate(&x0, &eps, 1.5).is_err());
        assert!(interpolate(&x0, &eps, -0.1).is_err());
    }

    #[test]
    fn target_cases() {
        let v = velocity_target(&Tensor::scalar(0.0), &Tensor::scalar(1.0)).unwrap();
        assert_eq!(v.item(), 1.0);
        let x = Tensor::from_fn(&[4], |i| i as f64 * 0.3);
        assert!(velocity_target(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let x0 = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let eps = Tensor::from_fn(&[4], |i| (i as f64).sin());
        let xt = interpolate(&x0, &eps, 0.3).unwrap();
        let lhs = eps.sub(&xt).unwrap().scale(1.0 / 0.7);
        assert!(lhs.max_abs_diff(&velocity_target(&x0, &eps).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn estimate_recovers_x0() {
        let f = estimate_f0(&Tensor::scalar(2.0), &Tensor::scalar(-2.0), 0.5).unwrap();
        assert_eq!(f.item(), 3.0);
        let ft = Tensor::from_fn(&[3], |i| i as f64);
        assert_eq!(estimate_f0(&ft, &Tensor::full(&[3], 9.0), 0.0).unwrap(), ft);
        let x0 = Tensor::from_fn(&[5], |i| (i as f64 * 1.3).cos());
        let eps = Tensor::from_fn(&[5], |i| (i as f64 * 0.7).sin());
        let v = velocity_target(&x0, &eps).unwrap();
        for k in 1..10 {
            let t = k as f64 / 10.0;
            let xt = interpolate(&x0, &eps, t).unwrap();
            let est = estimate_f0(&xt, &v, t).unwrap();
            assert!(est.max_abs_diff(&x0).unwrap() < 1e-12);
        }
    }

    #[test]
    fn analytic_limits() {
        let (mu0, t) = (1.3, 0.35);
        let m = (1.0 - t) * mu0;
        let v = analytic_gaussian_velocity(mu0, 0.7, &Tensor::scalar(m), t).unwrap();
        assert!((v.item() + mu0).abs() < 1e-12);
        let x = 0.42;
        let v = analytic_gaussian_velocity(mu0, 1e-9, &Tensor::scalar(x), t).unwrap();
        let limit = (x - (1.0 - t) * mu0) / t - mu0;
        assert!((v.item() - limit).abs() < 1e-9);
        assert!(analytic_gaussian_velocity(mu0, 0.0, &Tensor::scalar(x), t).is_err());
    }

    #[test]
    fn rf_loss_fixed_cases() {
        let c = 0.75;
        let eps = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.1);
        let x0 = eps.add_scalar(-c);
        let t = vec![0.1, 0.4, 0.6, 0.9];
        let l = rf_loss(&VelocityModel::constant(c), &x0, &eps, &t).unwrap();
        assert!(l.loss.abs() < 1e-24);
        let l = rf_loss(&VelocityModel::constant(0.0), &Tensor::zeros(&[4, 2]), &Tensor::full(&[4, 2], 1.0), &t).unwrap();
        assert_eq!(l.loss, 1.0);
        let bad = vec![0.1, 0.4, 0.6, 1.0];
        assert!(rf_loss(&VelocityModel::constant(c), &x0, &eps, &bad).is_err());
    }

    #[test]
    fn schedule_contract() {
        let s = SampleSchedule::uniform(7).unwrap();
        assert_eq!(s.grid()[0], 1.0);
        assert_eq!(*s.grid().last().unwrap(), 0.0);
        assert!(s.grid().windows(2).all(|w| w[1] < w[0]));
        assert!(SampleSchedule::uniform(0).is_err());
        assert!(SampleSchedule::custom(vec![1.0, 0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn constant_field_is_exact() {
        let m = VelocityModel::constant(2.0);
        let start = Tensor::scalar(1.0);
        for n in [1, 100] {
            let traj = euler_sample(&m, &start, &SampleSchedule::uniform(n).unwrap(), None).unwrap();
            assert_eq!(traj.states.len(), n + 1);
            assert_eq!(traj.states[0], start);
            assert!((traj.terminal().item() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_round_trips_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = VelocityModel::mlp(2, &[8, 8], &mut rng);
        let rebuilt = VelocityModel::mlp_from_params(m.params().clone()).unwrap();
        assert_eq!(rebuilt, m);
        let x = Tensor::from_fn(&[5, 2], |i| i as f64 * 0.1);
        assert_eq!(m.eval(&x, 0.3).unwrap().shape(), &[5, 2]);
        assert!(m.eval(&Tensor::zeros(&[3]), 0.3).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let m = VelocityModel::constant(f64::INFINITY);
        let err = euler_sample(&m, &Tensor::scalar(0.0), &SampleSchedule::uniform(3).unwrap(), None).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0 }));
    }
}
