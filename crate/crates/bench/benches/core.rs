use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ubr_core::diffcore::{Graph, Tensor};
use ubr_core::losses::{total_loss, ScoreTable};
use ubr_core::network::{forward, init_network, NetworkConfig};
use ubr_core::phantom::{Dataset, PhantomSpec};
use ubr_core::trainer::{TrainConfig, Trainer};

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let (input, kernels, bias) = (ramp(&[8, 8, 16, 16]), ramp(&[16, 8, 3, 3]), ramp(&[16]));
    c.bench_function("conv2d forward 8x8x16x16 -> 16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (x, k, bb) = (g.constant(input.clone()), g.constant(kernels.clone()), g.constant(bias.clone()));
            black_box(g.conv2d(x, k, bb, 1, 1).unwrap());
        })
    });
    c.bench_function("conv2d forward+backward 8x8x16x16 -> 16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (x, k, bb) = (g.parameter(input.clone()), g.parameter(kernels.clone()), g.parameter(bias.clone()));
            let y = g.conv2d(x, k, bb, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(k));
        })
    });
}

fn network(c: &mut Criterion) {
    let params = init_network(&NetworkConfig::default()).unwrap();
    let batch = ramp(&[48, 1, 32, 32]);
    c.bench_function("network forward 48x32x32", |b| b.iter(|| black_box(forward(&params, &batch).unwrap())));
}

fn losses(c: &mut Criterion) {
    let table = ScoreTable::new(6, 8, (0..48).map(|i| (i % 8) as f64 * 1.3 + (i / 8) as f64).collect()).unwrap();
    c.bench_function("total loss 6x8", |b| b.iter(|| black_box(total_loss(&table).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let spec = PhantomSpec {
        slices_range: [40, 60],
        ..PhantomSpec::default()
    };
    let dataset = Dataset::generate(12, &spec, 0.0, &[], 1).unwrap();
    let config = TrainConfig {
        iterations: usize::MAX,
        log_period: 0,
        ..TrainConfig::default()
    };
    c.bench_function("train step g=6 m=8 32x32", |b| {
        b.iter_batched(
            || Trainer::new(config.clone()).unwrap(),
            |mut t| black_box(t.step(&dataset).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, conv, network, losses, train_step);
criterion_main!(benches);
