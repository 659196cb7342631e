use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rffusion::autodiff::conv::{conv_forward, ConvGeom};
use rffusion::flow::{euler_endpoint_batch, SampleSchedule, VelocityModel};
use rffusion::par::Exec;
use rffusion::Tensor;
use std::hint::black_box;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = Tensor::from_fn(&[n, n], |k| (k % 13) as f64 * 0.1);
        let b = Tensor::from_fn(&[n, n], |k| (k % 7) as f64 - 3.0);
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bch, _| bch.iter(|| black_box(a.matmul_with(&b, exec).unwrap())));
        }
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    let (n, cin, cout, hw) = (8, 32, 64, 32);
    let g = ConvGeom::new(cin, hw, hw, 3, 1, 1).unwrap();
    let x: Vec<f64> = (0..n * cin * hw * hw).map(|k| (k % 17) as f64 / 17.0).collect();
    let w: Vec<f64> = (0..cout * cin * 9).map(|k| (k % 5) as f64 * 0.01).collect();
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| black_box(conv_forward(exec, &x, n, &w, cout, &g))));
    }
    group.finish();
}

fn sampler(c: &mut Criterion) {
    let mut group = c.benchmark_group("euler_batch");
    let m = VelocityModel::analytic_gaussian(0.5, 0.3).unwrap();
    let sched = SampleSchedule::uniform(50).unwrap();
    let starts: Vec<Tensor> = (0..64).map(|i| Tensor::full(&[32, 32], i as f64 / 64.0)).collect();
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| black_box(euler_endpoint_batch(exec, &m, &starts, &sched, None))));
    }
    group.finish();
}

criterion_group!(benches, matmul, conv, sampler);
criterion_main!(benches);
