//! End-to-end costs on the rayon pool against a single worker.

use std::hint::black_box;

use anonet::anonymizer::Anonymizer;
use anonet::config::AnonymizerConfig;
use anonet::detect::SkinToneDetector;
use anonet::losses::LossConfig;
use anonet::models::ModelBundle;
use anonet::nets::NetConfig;
use anonet::synth;
use anonet::training::{Batch, TrainConfig, TrainState, Trainer};
use anonet_tensor::par;
use criterion::{criterion_group, criterion_main, Criterion};
use image::RgbImage;

fn two_faces() -> RgbImage {
    let a = synth::disc_fixture(320, 160, 80.0, 80.0, 40.0);
    let b = synth::disc_fixture(320, 160, 240.0, 80.0, 36.0);
    RgbImage::from_fn(320, 160, |x, y| {
        if x < 160 {
            *a.get_pixel(x, y)
        } else {
            *b.get_pixel(x, y)
        }
    })
}

fn anonymize(c: &mut Criterion) {
    let anon = Anonymizer::new(
        ModelBundle::new(&NetConfig::toy(), 3, 1),
        Box::new(SkinToneDetector::default()),
        AnonymizerConfig::default(),
    )
    .unwrap();
    let frame = two_faces();
    let mut group = c.benchmark_group("anonymize_frame_two_faces");
    group.bench_function("pool", |b| {
        b.iter(|| anon.anonymize_frame(black_box(&frame)).unwrap())
    });
    group.bench_function("single", |b| {
        b.iter(|| par::with_single_thread(|| anon.anonymize_frame(black_box(&frame)).unwrap()))
    });
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let data = synth::toy_dataset(2, 2, 64, 1).unwrap();
    let batch = Batch::gather(&data, &[0], &[2]);
    let train = TrainConfig::default();
    let loss = LossConfig::default();
    let state = TrainState::new(
        ModelBundle::new(&NetConfig::toy(), loss.scales, 1),
        &train,
        vec![0.05; 5],
    );
    let fresh = Trainer::new(state, train, loss, 1).unwrap();
    let mut group = c.benchmark_group("toy_train_step");
    group.bench_function("pool", |b| {
        let mut t = fresh.clone();
        b.iter(|| t.train_step(&batch, 2e-4).unwrap())
    });
    group.bench_function("single", |b| {
        let mut t = fresh.clone();
        b.iter(|| par::with_single_thread(|| t.train_step(&batch, 2e-4).unwrap()))
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = anonymize, train_step
}
criterion_main!(benches);
