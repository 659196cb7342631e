use std::fs;
use std::path::{Path, PathBuf};

use rffuse::data::read_pairs;
use rffuse::fuse::Fuser;
use rffuse::models::load_codec;
use rffusion::codec::{decode, encode};
use rffusion::config::Config;
use rffusion::imageio::{read_image, write_image};
use tempfile::TempDir;

fn rffuse(args: &[&str]) -> anyhow::Result<()> {
    rffuse::run_from(std::iter::once("rffuse").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture { dir: TempDir::new().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn synth(&self) -> PathBuf {
        let data = self.path("data");
        rffuse(&["--out", s(&data), "synth", "--count", "4", "--size", "16"]).unwrap();
        data
    }

    /// 4 IVIF pairs of 16×16 and a three-step stage I codec trained on them.
    fn with_codec(&self) -> PathBuf {
        let data = self.synth();
        let cfg = self.config("c1.cfg", &format!("[data]\ndir = {}\n[codec]\nsteps = 3\nbatch = 4\n", s(&data)));
        rffuse(&["--config", s(&cfg), "--out", s(&self.path("c1")), "train", "codec1"]).unwrap();
        self.path("c1/codec1.rffz")
    }
}

fn csv_rows(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn synth_is_deterministic_and_guarded() {
    let fx = Fixture::new();
    let (a, b) = (fx.path("a"), fx.path("b"));
    rffuse(&["--seed", "5", "--out", s(&a), "synth", "--kind", "mef", "--count", "3", "--size", "12"]).unwrap();
    rffuse(&["--seed", "5", "--out", s(&b), "synth", "--kind", "mef", "--count", "3", "--size", "12"]).unwrap();
    let (pa, pb) = (read_pairs(&a).unwrap(), read_pairs(&b).unwrap());
    assert_eq!(pa.len(), 3);
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!((&x.a, &x.b), (&y.a, &y.b));
    }
    let err = rffuse(&["--out", s(&a), "synth", "--count", "1", "--size", "12"]).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    rffuse(&["--force", "--out", s(&a), "synth", "--count", "1", "--size", "12"]).unwrap();
    assert!(a.join("synth.config.txt").exists());
    assert!(rffuse(&["--out", s(&b), "--force", "synth", "--size", "10"]).is_err());
}

#[test]
fn flow_training_logs_and_resumes() {
    let fx = Fixture::new();
    let out = fx.path("toy");
    let cfg = fx.config("f.cfg", "[flow]\ntrain_steps = 6\nbatch = 32\nhidden = 8,8\n");
    rffuse(&["--config", s(&cfg), "--out", s(&out), "train", "flow"]).unwrap();
    let log = out.join("flow_loss.csv");
    assert!(fs::read_to_string(&log).unwrap().starts_with("step,rf,lr,wall_s\n"));
    assert_eq!(csv_rows(&log).len(), 6);
    assert!(rffuse(&["--config", s(&cfg), "--out", s(&out), "train", "flow"]).is_err());

    let split = fx.path("split");
    let short = fx.config("g.cfg", "[flow]\ntrain_steps = 3\nbatch = 32\nhidden = 8,8\n");
    rffuse(&["--config", s(&short), "--out", s(&split), "train", "flow"]).unwrap();
    rffuse(&["--config", s(&cfg), "--out", s(&split), "train", "flow", "--resume", s(&split.join("flow.rffz"))]).unwrap();
    let steps: Vec<String> = csv_rows(&split.join("flow_loss.csv")).iter().map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4", "5"]);
}

#[test]
fn constant_rate_resume_is_exact() {
    let fx = Fixture::new();
    let data = fx.synth();
    let body = |n: usize| format!("[data]\ndir = {}\n[codec]\nsteps = {n}\nbatch = 3\n", s(&data));
    let (full, part) = (fx.config("full.cfg", &body(6)), fx.config("part.cfg", &body(3)));
    rffuse(&["--config", s(&full), "--out", s(&fx.path("full")), "train", "codec1"]).unwrap();
    let split = fx.path("split");
    rffuse(&["--config", s(&part), "--out", s(&split), "train", "codec1"]).unwrap();
    let ck = split.join("codec1.rffz");
    rffuse(&["--config", s(&full), "--out", s(&split), "train", "codec1", "--resume", s(&ck)]).unwrap();
    assert_eq!(fs::read(&ck).unwrap(), fs::read(fx.path("full/codec1.rffz")).unwrap());
    // Everything but the wall-clock column.
    let losses = |p: PathBuf| csv_rows(&p).iter().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(losses(split.join("codec1_loss.csv")), losses(fx.path("full/codec1_loss.csv")));
}

#[test]
fn codec_stages_chain() {
    let fx = Fixture::new();
    let c1 = fx.with_codec();
    assert_eq!(csv_rows(&fx.path("c1/codec1_loss.csv")).len(), 3);
    let cfg =
        fx.config("c2.cfg", &format!("[data]\ndir = {}\n[codec]\nsteps = 4\nbatch = 2\ncheckpoint = {}\n", s(&fx.path("data")), s(&c1)));
    rffuse(&["--config", s(&cfg), "--out", s(&fx.path("c2")), "train", "codec2"]).unwrap();
    assert_eq!(csv_rows(&fx.path("c2/codec2_loss.csv")).len(), 4);
    let (p1, p2) = (load_codec(&c1).unwrap(), load_codec(&fx.path("c2/codec2.rffz")).unwrap());
    assert_eq!(p1.encoder, p2.encoder);
    assert_ne!(p1.decoder, p2.decoder);
    assert_eq!(p2.decoder_steps(), 4);

    let bad = fx.config("bad.cfg", &format!("[data]\ndir = {}\n[codec]\nsteps = 2\n", s(&fx.path("data"))));
    assert!(rffuse(&["--config", s(&bad), "--out", s(&fx.path("c3")), "train", "codec2"]).is_err());
}

#[test]
fn fusion_limits() {
    let fx = Fixture::new();
    let c1 = fx.with_codec();
    let pairs = read_pairs(&fx.path("data")).unwrap();
    let (a, b) = (&pairs[0].a, &pairs[0].b);

    let mut cfg = Config::default();
    cfg.codec.checkpoint = Some(c1.clone());
    cfg.guidance.rho = 0.0;
    let fuser = Fuser::from_config(&cfg).unwrap();
    let one = fuser.fuse_steps(a, b, 1, false).unwrap().image;
    assert_eq!(fuser.fuse_steps(a, b, 100, false).unwrap().image, one);
    let codec = load_codec(&c1).unwrap();
    assert_eq!(one, decode(&codec, &encode(&codec, b).unwrap()).unwrap());

    cfg.guidance.rho = 5.0;
    let guided = Fuser::from_config(&cfg).unwrap().fuse(a, b, false).unwrap().image;
    assert_ne!(guided, one);

    let (pa, pb) = (fx.path("a.png"), fx.path("b.png"));
    write_image(a, &pa).unwrap();
    write_image(b, &pb).unwrap();
    let out = fx.path("fz");
    rffuse(&["--out", s(&out), "fuse", "--a", s(&pa), "--b", s(&pb), "--codec", s(&c1), "--trajectory", "--steps", "3"]).unwrap();
    assert_eq!(read_image(&out.join("fused.png")).unwrap().dims(), (16, 16));
    assert!(out.join("trajectory/trajectory.rffz").exists());
    assert!(out.join("trajectory/state_003.png").exists());
    let again = rffuse(&["--out", s(&out), "fuse", "--a", s(&pa), "--b", s(&pb), "--codec", s(&c1)]);
    assert!(again.is_err());

    let data = fx.path("data");
    rffuse(&["--out", s(&out), "fuse", "--a", s(&data.join("A")), "--b", s(&data.join("B")), "--codec", s(&c1)]).unwrap();
    assert_eq!(fs::read_dir(out.join("fused")).unwrap().count(), 4);

    let odd = fx.path("odd.png");
    write_image(&rffusion::Image::constant(10, 10, 0.5), &odd).unwrap();
    let err = rffuse(&["--out", s(&out), "--force", "fuse", "--a", s(&odd), "--b", s(&odd), "--codec", s(&c1)]).unwrap_err();
    assert!(format!("{err:#}").contains("12×12"), "{err:#}");
}

#[test]
fn eval_table_shape() {
    let fx = Fixture::new();
    let data = fx.path("data");
    rffuse(&["--out", s(&data), "synth", "--count", "3", "--size", "16"]).unwrap();
    let out = fx.path("ev");
    let a = data.join("A");
    rffuse(&["--out", s(&out), "eval", "--fused", s(&a), "--a", s(&a), "--b", s(&a)]).unwrap();
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = header.iter().position(|h| *h == "SSIM").unwrap();
    for l in &lines[1..] {
        let v: f64 = l.split(',').nth(col).unwrap().parse().unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{l}");
    }
    assert!(lines[4].starts_with("mean,"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);

    let b = data.join("B");
    fs::remove_file(b.join(&rffuse::data::image_names(&b).unwrap()[0])).unwrap();
    rffuse(&["--out", s(&out), "--force", "eval", "--fused", s(&a), "--a", s(&a), "--b", s(&b)]).unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert_eq!(json["missing"].as_array().unwrap().len(), 1);
}

#[test]
fn bench_rows_follow_steps() {
    let fx = Fixture::new();
    let c1 = fx.with_codec();
    let cfg = fx.config("b.cfg", &format!("[data]\ndir = {}\n", s(&fx.path("data"))));
    let out = fx.path("bench");
    rffuse(&["--config", s(&cfg), "--out", s(&out), "bench", "--steps", "1,2,4", "--runs", "5", "--codec", s(&c1)]).unwrap();
    assert_eq!(csv_rows(&out.join("bench.csv")).len(), 3);
    assert_eq!(csv_rows(&out.join("bench_scatter.csv")).len(), 15);
}
