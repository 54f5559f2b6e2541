use criterion::{criterion_group, criterion_main, Criterion};
use posenorm_bench::{distances, pair_data, random_tensor};
use posenorm_core::gan::{train_step, GanState, GanTrainConfig, PairBatch};
use posenorm_core::networks::{init_params, ArchConfig};
use posenorm_core::nn::Conv2d;
use posenorm_core::retrieval::{cmc_map, EvalProtocol, ItemMeta};
use rand::SeedableRng;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let layer = Conv2d::<f32>::new(16, 16, 3, 1, 1, false, 2.0, &mut rng);
    let x = random_tensor(&[16, 8, 32, 16], 1);
    c.bench_function("conv3x3 16ch 8x32x16 forward", |b| {
        b.iter(|| layer.forward(black_box(&x)))
    });
    let (y, cache) = layer.forward(&x);
    let dy = random_tensor(y.shape(), 2);
    c.bench_function("conv3x3 16ch 8x32x16 backward", |b| {
        b.iter(|| {
            let mut grad = layer.clone();
            layer.backward(&cache, black_box(&dy), &mut grad, true)
        })
    });
}

fn gan_step(c: &mut Criterion) {
    let (data, pairs) = pair_data();
    let batch = PairBatch::<f32>::assemble(&data, &pairs).unwrap();
    let arch = ArchConfig {
        base_channels: 8,
        ..ArchConfig::default()
    };
    let cfg = GanTrainConfig::default();
    let (g, d) = init_params::<f32>(&arch, 0).unwrap();
    let mut state = GanState::new(g, d, &cfg);
    let mut group = c.benchmark_group("gan");
    group.sample_size(10);
    group.bench_function("train_step base8 batch8 64x32", |b| {
        b.iter(|| train_step(&mut state, black_box(&batch), &cfg.loss, 1).unwrap())
    });
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let d = distances(100, 400, 3);
    let meta = |n: usize, cam: usize| {
        (0..n)
            .map(|i| ItemMeta {
                label: i % 50,
                camera: (i + cam) % 2,
            })
            .collect::<Vec<_>>()
    };
    let (q, g) = (meta(100, 0), meta(400, 1));
    c.bench_function("cmc_map 100x400", |b| {
        b.iter(|| cmc_map(black_box(&d), &q, &g, EvalProtocol::default()).unwrap())
    });
}

criterion_group!(benches, conv, gan_step, retrieval);
criterion_main!(benches);
