use std::hint::black_box;

use concat_core::config::RunConfig;
use concat_core::datagen::{generate_dataset, DatasetSpec};
use concat_core::losses::mmd_value;
use concat_core::matching::hungarian;
use concat_core::pipeline::train_stage1;
use concat_core::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn bench_hungarian(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cost = random(&mut rng, 12, 4);
    c.bench_function("hungarian_12x4", |b| b.iter(|| hungarian(black_box(&cost)).unwrap()));
    let square = random(&mut rng, 6, 6);
    c.bench_function("hungarian_6x6", |b| b.iter(|| hungarian(black_box(&square)).unwrap()));
}

fn bench_mmd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let real = random(&mut rng, 32, 32);
    let generated = random(&mut rng, 32, 32);
    let bw = [2.0, 5.0, 10.0, 20.0, 40.0, 60.0];
    c.bench_function("mmd_32x32", |b| b.iter(|| mmd_value(black_box(&real), black_box(&generated), &bw).unwrap()));
}

fn bench_stage1_epoch(c: &mut Criterion) {
    let spec = DatasetSpec {
        n_train: 16,
        n_test: 1,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let mut cfg = RunConfig::default();
    cfg.stages.stage1_epochs = 1;
    let seen = ds.table.seen();
    c.bench_function("stage1_epoch_16_images", |b| {
        b.iter(|| train_stage1(black_box(&ds.train), &seen, &cfg).unwrap())
    });
}

criterion_group!(benches, bench_hungarian, bench_mmd, bench_stage1_epoch);
criterion_main!(benches);
