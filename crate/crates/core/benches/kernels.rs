use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gkd_core::kernels::{conv3d_backward_batch, conv3d_forward_batch, ConvGeometry};
use gkd_core::models::{build_model, ArchSpec, Family, WidthScale};
use gkd_core::{Parallelism, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("parallel", Parallelism::Parallel),
];

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let geom = ConvGeometry::down4();
    let x = random(vec![32, 8, 4, 32, 32], &mut rng);
    let w = random(vec![16, 8, 4, 4, 4], &mut rng);
    let b = random(vec![16], &mut rng);
    let y = conv3d_forward_batch(&x, &w, &b, geom, Parallelism::Sequential).unwrap();
    let mut group = c.benchmark_group("conv3d");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::new("forward", name), |bench| {
            bench.iter(|| conv3d_forward_batch(&x, &w, &b, geom, par).unwrap())
        });
        group.bench_function(BenchmarkId::new("backward", name), |bench| {
            bench.iter(|| conv3d_backward_batch(&x, &w, &b, &y, geom, true, par).unwrap())
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ArchSpec::new(Family::Joint, WidthScale::QUARTER).with_classes(8);
    let model = build_model(spec, 0).unwrap();
    let videos: Vec<Tensor<f32>> = (0..16).map(|_| random(vec![2, 16, 64, 64], &mut rng)).collect();
    let mut group = c.benchmark_group("joint_quarter_logits");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| model.logits_batched(&videos, 4, par).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, inference);
criterion_main!(benches);
