use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rffusion::autodiff::AdamConfig;
use rffusion::codec::{stage1_step, stage2_step, CodecConfig, CodecParams, Freeze, LossWeights};
use rffusion::flow::{euler_endpoint, SampleSchedule, VelocityModel};
use rffusion::guidance::WeightMaps;
use rffusion::synth::{generate, SynthKind};
use rffusion::{Image, Tensor};

fn codec(seed: u64) -> CodecParams {
    CodecParams::init(CodecConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn pairs(n: usize, size: usize) -> Vec<(Image, Image)> {
    generate(SynthKind::Ivif, n, size, 4).unwrap().into_iter().map(|p| (p.a, p.b)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn decoder_only_stage_keeps_encoder() {
    let mut p = codec(2);
    p.freeze = Freeze::Encoder;
    let before = p.encoder.clone();
    let dec0 = p.decoder.clone();
    let data = pairs(2, 16);
    for _ in 0..100 {
        stage2_step(&mut p, &data, None, &LossWeights::default(), AdamConfig::with_lr(1e-3)).unwrap();
    }
    for (name, t) in before.iter() {
        let after = p.encoder.get(name).unwrap();
        assert!(t.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name} moved");
    }
    assert_ne!(p.decoder, dec0);
    assert_eq!(p.decoder_steps(), 100);

    let mut unfrozen = codec(2);
    assert!(stage2_step(&mut unfrozen, &data, None, &LossWeights::default(), AdamConfig::with_lr(1e-3)).is_err());
}

#[test]
fn mask_term_pulls_towards_visible() {
    let mut p = codec(3);
    p.freeze = Freeze::Encoder;
    let data = pairs(2, 16);
    let maps = vec![WeightMaps::uniform(16, 16, 1.0).unwrap(); 2];
    let w = LossWeights { fre: 0.0, int: 0.0, ssim: 0.0, grad: 0.0, color: 0.0, mask: 1.0 };
    let mut hist = Vec::new();
    for _ in 0..200 {
        let l = stage2_step(&mut p, &data, Some(&maps), &w, AdamConfig::with_lr(1e-3)).unwrap();
        assert_eq!(l.total, l.components.mask);
        hist.push(l.components.mask);
    }
    let windows: Vec<f64> = hist.chunks(50).map(mean).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "{windows:?}");
    }
}

#[test]
fn stage1_is_reproducible() {
    let imgs: Vec<Image> = pairs(2, 16).into_iter().flat_map(|(a, b)| [a, b]).collect();
    let run = || {
        let mut p = codec(7);
        let mut out = Vec::new();
        for _ in 0..5 {
            out.push(stage1_step(&mut p, &imgs, &LossWeights::default(), AdamConfig::with_lr(1e-3)).unwrap());
        }
        (p, out)
    };
    let (p1, l1) = run();
    let (p2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(p1, p2);

    let mut p = codec(7);
    let no_fre = LossWeights { fre: 0.0, ..Default::default() };
    let l = stage1_step(&mut p, &imgs, &no_fre, AdamConfig::with_lr(1e-3)).unwrap();
    assert_eq!(l.total, l.rec);
    assert!(l.fre > 0.0);
}

#[test]
fn analytic_flow_recovers_gaussian() {
    let (mu0, sigma0) = (2.0, 0.5);
    let m = VelocityModel::analytic_gaussian(mu0, sigma0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Tensor::from_fn(&[10_000], |_| StandardNormal.sample(&mut rng));
    let end = euler_endpoint(&m, &start, &SampleSchedule::uniform(200).unwrap(), None).unwrap();
    let n = end.numel() as f64;
    let mu = end.data().iter().sum::<f64>() / n;
    let sd = (end.data().iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mu - mu0).abs() / mu0 < 0.02, "mean {mu}");
    assert!((sd - sigma0).abs() / sigma0 < 0.03, "std {sd}");
}
