use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rffusion::autodiff::{check_gradients, GradCheckOptions, GradCheckReport};
use rffusion::codec::{stage1_graph, CodecConfig, CodecParams, LossWeights};
use rffusion::flow::{rf_loss_graph, VelocityModel};
use rffusion::guidance::{residual_graph, GradMode, GuidanceSources, GuidanceSpec, Measurement};
use rffusion::{Image, Tensor};

fn texture(n: usize, k: f64) -> Image {
    Image::gray_from_fn(n, n, |r, c| 0.5 + 0.35 * ((r as f64 * k).sin() * (c as f64 * 0.7 + k).cos()))
}

fn assert_report(r: &GradCheckReport, what: &str) {
    let checked: usize = r.inputs.iter().map(|i| i.checked).sum();
    let excluded: usize = r.inputs.iter().map(|i| i.excluded.len()).sum();
    assert!(checked > excluded, "{what}: only {checked} elements checked, {excluded} excluded");
    assert!(r.passed(), "{what}: max rel error {:.3e}", r.max_rel_error());
}

#[test]
fn rf_loss_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = VelocityModel::mlp(64, &[16, 16], &mut rng);
    let x0 = Tensor::from_fn(&[2, 64], |k| texture(8, 0.4 + (k / 64) as f64 * 0.3).data()[k % 64]);
    let eps = Tensor::from_fn(&[2, 64], |k| ((k * 37 % 23) as f64 - 11.0) / 7.0);
    let (g, bound, loss) = rf_loss_graph(&m, &x0, &eps, &[0.3, 0.75]).unwrap();
    let r = check_gradients(&g, loss, &bound.ids(), GradCheckOptions::default()).unwrap();
    assert_report(&r, "rf loss");
}

#[test]
fn stage1_loss_through_fft() {
    let p = CodecParams::init(CodecConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let batch = [texture(8, 0.5), texture(8, 1.1)];
    let w = LossWeights::default();
    let (g, be, bd, total, _, fre) = stage1_graph(&p, &batch, &w).unwrap();
    assert!(g.value(fre).item() > 0.0);
    let mut ids = be.ids();
    ids.extend(bd.ids());
    let opts = GradCheckOptions { max_elements: Some(24), ..Default::default() };
    let r = check_gradients(&g, total, &ids, opts).unwrap();
    assert_report(&r, "stage I");
}

#[test]
fn full_vjp_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = VelocityModel::mlp(64, &[32, 32], &mut rng);
    let (i, v) = (texture(8, 0.3), texture(8, 0.9));
    let src = GuidanceSources::pixel(&i, &v).unwrap();
    for measurement in [Measurement::WeightedTarget, Measurement::EmPrior { iters: 3, scale: 0.1 }] {
        let spec = GuidanceSpec { grad_mode: GradMode::FullVjp, measurement, ..GuidanceSpec::with_rho(2.0) };
        let f_t = Tensor::from_fn(src.i.shape(), |k| 0.5 + 0.3 * ((k * 13 % 17) as f64 / 17.0 - 0.5));
        let (g, x, loss) = residual_graph(&f_t, 0.6, &m, &src, &spec).unwrap();
        let r = check_gradients(&g, loss, &[x], GradCheckOptions::default()).unwrap();
        assert_report(&r, "full vjp residual");
    }
}
