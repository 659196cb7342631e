//! Fusion guidance for the sampler: saliency weights, measurement targets,
//! the residual gradient and the guided velocity.
//!
//! The residual is `R(f_t) = ρ(t)·||y - f̂0(f_t)||²` with
//! `f̂0 = f_t - t·v(f_t, t)`. The sampler steps `f ← f - Δt·v_eff`, so the
//! guided velocity adds `+∇R` and the state moves down the residual.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::flow::{estimate_f0, VelocityField, VelocityModel};
use crate::image::{gaussian_blur, Image};
use crate::par::Exec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RhoSchedule {
    #[default]
    Constant,
    /// `ρ(t) = ρ·t`.
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    WeightedTarget,
    /// Laplace-responsibility blend, `iters` rounds at noise scale `scale`.
    EmPrior {
        iters: usize,
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Differentiates through the velocity network.
    FullVjp,
    /// Treats `∂f̂0/∂f_t` as the identity.
    #[default]
    StopGrad,
}

/// How the residual gradient enters a step of size `Δt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateRule {
    /// Gradient damped by `1 / (1 + 2ρ(t)Δt)`: the proximal step of the
    /// quadratic residual, stable for any `ρ`.
    #[default]
    SemiImplicit,
    /// Raw gradient; diverges once `2ρΔt > 2`.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSpec {
    pub rho: f64,
    pub schedule: RhoSchedule,
    pub measurement: Measurement,
    pub grad_mode: GradMode,
    pub update: UpdateRule,
}

pub const DEFAULT_RHO: f64 = 0.5;
pub const DEFAULT_EM_ITERS: usize = 3;
pub const DEFAULT_EM_SCALE: f64 = 0.1;

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec {
            rho: DEFAULT_RHO,
            schedule: RhoSchedule::Constant,
            measurement: Measurement::WeightedTarget,
            grad_mode: GradMode::StopGrad,
            update: UpdateRule::SemiImplicit,
        }
    }
}

impl GuidanceSpec {
    pub fn with_rho(rho: f64) -> Self {
        GuidanceSpec { rho, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidArgument(format!("rho must be finite and >= 0, got {}", self.rho)));
        }
        if let Measurement::EmPrior { iters, scale } = self.measurement {
            if iters == 0 {
                return Err(Error::InvalidArgument("em iters must be >= 1".into()));
            }
            if !(scale > 0.0) {
                return Err(Error::InvalidArgument(format!("em scale must be positive, got {scale}")));
            }
        }
        Ok(())
    }

    pub fn rho_at(&self, t: f64) -> f64 {
        match self.schedule {
            RhoSchedule::Constant => self.rho,
            RhoSchedule::LinearDecay => self.rho * t,
        }
    }
}

/// Per-pixel blend weights, `[H, W]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMaps {
    pub w_v: Tensor,
    pub w_ir: Tensor,
}

impl WeightMaps {
    pub fn new(w_v: Tensor, w_ir: Tensor) -> Result<Self> {
        w_v.same_shape(&w_ir, "weight maps")?;
        if w_v.rank() != 2 {
            return Err(Error::InvalidShape { op: "weight maps", msg: format!("expected [H, W], got {:?}", w_v.shape()) });
        }
        for (a, b) in w_v.data().iter().zip(w_ir.data()) {
            if !(0.0..=1.0).contains(a) || !(0.0..=1.0).contains(b) || (a + b - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("weights ({a}, {b}) are not a partition of unity")));
            }
        }
        Ok(WeightMaps { w_v, w_ir })
    }

    /// Constant `W_v = w`.
    pub fn uniform(height: usize, width: usize, w: f64) -> Result<Self> {
        WeightMaps::new(Tensor::full(&[height, width], w), Tensor::full(&[height, width], 1.0 - w))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w_v.shape()[0], self.w_v.shape()[1])
    }

    /// `W_v` average-pooled by `factor` and repeated over `channels`:
    /// `[channels, H/factor, W/factor]`.
    pub fn pooled_w_v(&self, factor: usize, channels: usize) -> Result<Tensor> {
        let (h, w) = self.dims();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidShape { op: "pooled weights", msg: format!("{h}x{w} is not divisible by {factor}") });
        }
        let (ph, pw) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut plane = vec![0.0; ph * pw];
        for (r, row) in self.w_v.data().chunks(w).enumerate() {
            for (c, &x) in row.iter().enumerate() {
                plane[(r / factor) * pw + c / factor] += x * norm;
            }
        }
        let data = plane.iter().copied().cycle().take(channels * ph * pw).collect();
        Tensor::new(vec![channels, ph, pw], data)
    }
}

pub const SALIENCY_SIGMA: f64 = 3.0;
const SALIENCY_EPS: f64 = 1e-8;

fn saliency(img: &Image) -> Result<Tensor> {
    let y = img.luma();
    let plane = y.plane_tensor(0);
    let mean = plane.mean();
    gaussian_blur(&plane.map(|x| (x - mean).abs()), SALIENCY_SIGMA)
}

/// Blurred deviation-from-mean saliency, normalized per pixel. Color inputs
/// use their luma.
pub fn saliency_weights(i: &Image, v: &Image) -> Result<WeightMaps> {
    i.same_dims(v)?;
    let si = saliency(i)?;
    let sv = saliency(v)?;
    let mut w_ir = Vec::with_capacity(si.numel());
    let mut w_v = Vec::with_capacity(si.numel());
    for (&a, &b) in si.data().iter().zip(sv.data()) {
        let den = (a + b) + SALIENCY_EPS;
        w_ir.push((a + SALIENCY_EPS / 2.0) / den);
        w_v.push((b + SALIENCY_EPS / 2.0) / den);
    }
    let shape = si.shape().to_vec();
    Ok(WeightMaps { w_v: Tensor::new(shape.clone(), w_v)?, w_ir: Tensor::new(shape, w_ir)? })
}

/// `W_v·v + W_ir·i` per channel, clamped to `[0, 1]`.
pub fn weighted_target(i: &Image, v: &Image, w: &WeightMaps) -> Result<Image> {
    i.same_dims(v)?;
    if i.space() != v.space() {
        return Err(Error::Image("weighted_target needs matching color spaces".into()));
    }
    if w.dims() != i.dims() {
        return Err(Error::ShapeMismatch { op: "weighted_target", left: vec![i.height(), i.width()], right: w.w_v.shape().to_vec() });
    }
    let n = i.height() * i.width();
    let data = i
        .data()
        .iter()
        .zip(v.data())
        .enumerate()
        .map(|(k, (&a, &b))| {
            let p = k % n;
            (w.w_v.data()[p] * b + w.w_ir.data()[p] * a).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(i.height(), i.width(), i.space(), data)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// EM-style refinement starting from `f0_hat`. Each round computes the
/// responsibility of `i` under Laplace noise of scale `scale`,
/// `r = σ((|f - v| - |f - i|) / scale)`, then sets `f = v + r·(i - v)`.
pub fn em_fusion_prior(f0_hat: &Tensor, i: &Tensor, v: &Tensor, iters: usize, scale: f64) -> Result<Tensor> {
    if iters == 0 {
        return Err(Error::InvalidArgument("em iters must be >= 1".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("em scale must be positive, got {scale}")));
    }
    f0_hat.same_shape(i, "em_fusion_prior")?;
    f0_hat.same_shape(v, "em_fusion_prior")?;
    let mut f = f0_hat.clone();
    for _ in 0..iters {
        for ((fk, &a), &b) in f.data_mut().iter_mut().zip(i.data()).zip(v.data()) {
            let r = sigmoid(((*fk - b).abs() - (*fk - a).abs()) / scale);
            *fk = b + r * (a - b);
        }
    }
    Ok(f)
}

/// Sources and weights already expressed in the sampling space
/// (pixels or latents), all of the shape of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSources {
    pub i: Tensor,
    pub v: Tensor,
    pub w_v: Tensor,
}

impl GuidanceSources {
    pub fn new(i: Tensor, v: Tensor, w_v: Tensor) -> Result<Self> {
        i.same_shape(&v, "guidance sources")?;
        i.same_shape(&w_v, "guidance sources")?;
        Ok(GuidanceSources { i, v, w_v })
    }

    /// Pixel-space sources with saliency weights.
    pub fn pixel(i: &Image, v: &Image) -> Result<Self> {
        let w = saliency_weights(i, v)?;
        Self::pixel_with(i, v, &w)
    }

    pub fn pixel_with(i: &Image, v: &Image, w: &WeightMaps) -> Result<Self> {
        i.same_dims(v)?;
        let w_v = w.pooled_w_v(1, i.channels())?;
        GuidanceSources::new(i.to_tensor(), v.to_tensor(), w_v)
    }

    /// `W_v·v + (1 - W_v)·i`.
    pub fn blend(&self) -> Tensor {
        let data = self.i.data().iter().zip(self.v.data()).zip(self.w_v.data()).map(|((&a, &b), &w)| w * b + (1.0 - w) * a).collect();
        Tensor::new(self.i.shape().to_vec(), data).expect("same shape")
    }
}

/// Measurement `y` for the current clean estimate.
pub fn measurement_target(f0_hat: &Tensor, src: &GuidanceSources, spec: &GuidanceSpec) -> Result<Tensor> {
    match spec.measurement {
        Measurement::WeightedTarget => Ok(src.blend()),
        Measurement::EmPrior { iters, scale } => em_fusion_prior(f0_hat, &src.i, &src.v, iters, scale),
    }
}

/// Builds `ρ(t)·||y - f̂0(x)||²` with `x = f_t` as a leaf. `y` enters as a
/// constant evaluated at the current estimate. Returns `(graph, x, residual)`.
pub fn residual_graph(
    f_t: &Tensor,
    t: f64,
    m: &VelocityModel,
    src: &GuidanceSources,
    spec: &GuidanceSpec,
) -> Result<(Graph, crate::autodiff::NodeId, crate::autodiff::NodeId)> {
    f_t.same_shape(&src.i, "residual")?;
    let rows = m.rows(f_t.numel())?;
    let d = f_t.numel() / rows;
    let v_now = m.eval(f_t, t)?;
    let y = measurement_target(&estimate_f0(f_t, &v_now, t)?, src, spec)?;
    let mut g = Graph::with_exec(Exec::Sequential);
    let bound = m.params().bind(&mut g);
    let shape2 = if m.dim().is_some() { vec![rows, d] } else { f_t.shape().to_vec() };
    let times = vec![t; if m.dim().is_some() { rows } else { 1 }];
    let x = g.leaf(f_t.reshape(&shape2)?);
    let v = m.build(&mut g, &bound, x, &times)?;
    let tv = g.scale(v, t)?;
    let f0 = g.sub(x, tv)?;
    let yc = g.constant(y.reshape(&shape2)?);
    let r = g.sub(yc, f0)?;
    let sq = g.square(r)?;
    let s = g.sum(sq)?;
    let loss = g.scale(s, spec.rho_at(t))?;
    Ok((g, x, loss))
}

/// `∇_{f_t} ρ(t)·||y - f̂0||²`.
pub fn likelihood_grad(f_t: &Tensor, t: f64, m: &VelocityModel, src: &GuidanceSources, spec: &GuidanceSpec) -> Result<Tensor> {
    spec.validate()?;
    f_t.same_shape(&src.i, "likelihood_grad")?;
    let rho = spec.rho_at(t);
    if rho == 0.0 {
        return Ok(Tensor::zeros(f_t.shape()));
    }
    let grad = match spec.grad_mode {
        GradMode::StopGrad => {
            let v = m.eval(f_t, t)?;
            let f0 = estimate_f0(f_t, &v, t)?;
            let y = measurement_target(&f0, src, spec)?;
            f0.zip_map(&y, "likelihood_grad", |a, b| 2.0 * rho * (a - b))?
        }
        GradMode::FullVjp => {
            let (g, x, loss) = residual_graph(f_t, t, m, src, spec)?;
            let mut grads = g.backward(loss, &[x])?;
            grads.take(x).ok_or_else(|| Error::NonFiniteGradient("residual has no gradient".into()))?.reshape(f_t.shape())?
        }
    };
    if !grad.all_finite() {
        return Err(Error::NonFiniteGradient(format!("likelihood gradient at t = {t}")));
    }
    Ok(grad)
}

/// `v(f_t, t) + κ·∇R` where `κ` is 1 for explicit updates and
/// `1 / (1 + 2ρ(t)Δt)` for semi-implicit ones. Exactly `v` when `ρ(t) = 0`.
pub fn guided_velocity(f_t: &Tensor, t: f64, dt: f64, m: &VelocityModel, src: &GuidanceSources, spec: &GuidanceSpec) -> Result<Tensor> {
    let v = m.eval(f_t, t)?;
    let rho = spec.rho_at(t);
    if rho == 0.0 {
        return Ok(v);
    }
    let lg = likelihood_grad(f_t, t, m, src, spec)?;
    let k = match spec.update {
        UpdateRule::Explicit => 1.0,
        UpdateRule::SemiImplicit => 1.0 / (1.0 + 2.0 * rho * dt),
    };
    let mut out = v;
    out.axpy(k, &lg)?;
    Ok(out)
}

/// A spec bound to its sources, pluggable into the Euler sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub spec: GuidanceSpec,
    pub sources: GuidanceSources,
}

impl Guidance {
    pub fn new(spec: GuidanceSpec, sources: GuidanceSources) -> Result<Self> {
        spec.validate()?;
        Ok(Guidance { spec, sources })
    }
}

impl VelocityField for Guidance {
    fn velocity(&self, model: &VelocityModel, f_t: &Tensor, t: f64, dt: f64) -> Result<Tensor> {
        guided_velocity(f_t, t, dt, model, &self.sources, &self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{euler_sample, SampleSchedule};

    fn blob(h: usize, w: usize) -> Image {
        Image::gray_from_fn(h, w, |r, c| {
            let d2 = (r as f64 - 8.0).powi(2) + (c as f64 - 8.0).powi(2);
            (-d2 / 8.0).exp()
        })
    }

    #[test]
    fn identical_sources_split_evenly() {
        let img = blob(16, 16);
        let w = saliency_weights(&img, &img).unwrap();
        assert!(w.w_v.data().iter().all(|&x| x == 0.5));
        let flat = Image::constant(8, 8, 0.3);
        let w = saliency_weights(&flat, &flat).unwrap();
        assert!(w.w_ir.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn blob_dominates_weights() {
        let w = saliency_weights(&Image::constant(16, 16, 0.2), &blob(16, 16)).unwrap();
        assert!(w.w_v.data()[8 * 16 + 8] > 0.999);
    }

    #[test]
    fn saliency_rejects_mismatch() {
        assert!(saliency_weights(&Image::constant(8, 8, 0.0), &Image::constant(8, 9, 0.0)).is_err());
    }

    #[test]
    fn weighted_target_cases() {
        let i = Image::constant(4, 4, 0.0);
        let v = Image::constant(4, 4, 1.0);
        let half = weighted_target(&i, &v, &WeightMaps::uniform(4, 4, 0.5).unwrap()).unwrap();
        assert!(half.data().iter().all(|&x| x == 0.5));
        let v = blob(16, 16);
        let i = Image::constant(16, 16, 0.7);
        let out = weighted_target(&i, &v, &WeightMaps::uniform(16, 16, 1.0).unwrap()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn pooled_weights_shape() {
        let w = WeightMaps::uniform(8, 8, 0.25).unwrap();
        let p = w.pooled_w_v(4, 4).unwrap();
        assert_eq!(p.shape(), &[4, 2, 2]);
        assert!(p.data().iter().all(|&x| x == 0.25));
        assert!(w.pooled_w_v(3, 1).is_err());
    }

    #[test]
    fn em_degenerate_and_fixed_point() {
        let i = Tensor::from_fn(&[10], |k| k as f64 / 10.0);
        let f0 = Tensor::from_fn(&[10], |k| (k as f64).sin());
        assert_eq!(em_fusion_prior(&f0, &i, &i, 1, 0.1).unwrap(), i);
        // Sources at least 4 scales apart, where the iteration contracts.
        let i = Tensor::from_fn(&[4], |k| k as f64 / 10.0);
        let v = i.map(|x| 1.0 - x);
        let f0 = Tensor::from_fn(&[4], |k| (k as f64).sin());
        let fixed = em_fusion_prior(&f0, &i, &v, 200, 0.1).unwrap();
        let again = em_fusion_prior(&fixed, &i, &v, 1, 0.1).unwrap();
        assert!(again.max_abs_diff(&fixed).unwrap() < 1e-9);
        assert!(em_fusion_prior(&f0, &i, &v, 0, 0.1).is_err());
    }

    #[test]
    fn stop_grad_closed_form_at_t0() {
        let src = GuidanceSources::new(Tensor::zeros(&[3]), Tensor::full(&[3], 0.8), Tensor::full(&[3], 0.5)).unwrap();
        let f = Tensor::from_fn(&[3], |k| k as f64);
        let spec = GuidanceSpec::with_rho(2.0);
        let g = likelihood_grad(&f, 0.0, &VelocityModel::constant(0.3), &src, &spec).unwrap();
        let want = f.map(|x| 4.0 * (x - 0.4));
        assert!(g.max_abs_diff(&want).unwrap() < 1e-12);
        let y = src.blend();
        let z = likelihood_grad(&y, 0.0, &VelocityModel::constant(0.3), &src, &spec).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_rho_is_unguided() {
        let m = VelocityModel::analytic_gaussian(0.5, 0.3).unwrap();
        let start = Tensor::from_fn(&[2, 4, 4], |k| (k as f64 * 0.37).sin());
        let src = GuidanceSources::new(start.map(|x| x * 0.1), start.map(|x| x.abs()), Tensor::full(&[2, 4, 4], 0.5)).unwrap();
        let guide = Guidance::new(GuidanceSpec::with_rho(0.0), src).unwrap();
        let sched = SampleSchedule::uniform(5).unwrap();
        let a = euler_sample(&m, &start, &sched, None).unwrap();
        let b = euler_sample(&m, &start, &sched, Some(&guide)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn correction_opposes_gradient() {
        let m = VelocityModel::analytic_gaussian(0.5, 0.3).unwrap();
        let f = Tensor::from_fn(&[16], |k| (k as f64 * 0.7).cos());
        let src = GuidanceSources::new(Tensor::zeros(&[16]), Tensor::full(&[16], 1.0), Tensor::full(&[16], 1.0)).unwrap();
        for mode in [GradMode::StopGrad, GradMode::FullVjp] {
            let spec = GuidanceSpec { grad_mode: mode, ..GuidanceSpec::with_rho(1.5) };
            let (t, dt) = (0.6, 0.2);
            let lg = likelihood_grad(&f, t, &m, &src, &spec).unwrap();
            let gv = guided_velocity(&f, t, dt, &m, &src, &spec).unwrap();
            let correction = m.eval(&f, t).unwrap().sub(&gv).unwrap().scale(dt);
            assert!(correction.dot(&lg).unwrap() <= 0.0);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(GuidanceSpec::with_rho(-1.0).validate().is_err());
        let em = GuidanceSpec { measurement: Measurement::EmPrior { iters: 0, scale: 0.1 }, ..Default::default() };
        assert!(em.validate().is_err());
        let lin = GuidanceSpec { schedule: RhoSchedule::LinearDecay, ..GuidanceSpec::with_rho(2.0) };
        assert_eq!(lin.rho_at(0.25), 0.5);
    }
}
