use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use deepiv_bench::fixture_dataset;
use deepiv_core::baselines::fit_2sls;
use deepiv_core::outcome::{mc_two_sample_gradient, DrawStreams, Observation};
use deepiv_core::rng::RngStream;
use deepiv_core::treatment::{train_first_stage, FirstStageConfig, HeadSpec};

fn bench_two_draw_gradient(c: &mut Criterion) {
    let data = fixture_dataset(2000, 5);
    let config = FirstStageConfig {
        head: HeadSpec::Mixture { components: 10 },
        hidden: vec![50],
        epochs: 3,
        seed: Some(6),
        ..FirstStageConfig::default()
    };
    let tmodel = train_first_stage(&data, &config).unwrap();
    let ss = deepiv_core::outcome::SecondStageConfig {
        hidden: vec![50],
        epochs: 1,
        seed: Some(7),
        ..deepiv_core::outcome::SecondStageConfig::default()
    };
    let omodel = deepiv_core::outcome::train_second_stage(&data, &tmodel, &ss).unwrap();
    let root = RngStream::root(8);
    let obs = Observation {
        x: data.x_row(0),
        z: data.z_row(0),
        y: data.y[0],
    };
    c.bench_function("two_draw_gradient", |b| {
        let mut epoch = 0u64;
        b.iter(|| {
            epoch += 1;
            let mut streams = DrawStreams::for_observation(&root, epoch, 0);
            mc_two_sample_gradient(black_box(&omodel), &tmodel, obs, 1, &mut streams).unwrap()
        })
    });
}

fn bench_first_stage_epoch(c: &mut Criterion) {
    let data = fixture_dataset(1000, 9);
    let config = FirstStageConfig {
        head: HeadSpec::Mixture { components: 10 },
        hidden: vec![50],
        epochs: 1,
        val_fraction: 0.0,
        seed: Some(10),
        ..FirstStageConfig::default()
    };
    c.bench_function("first_stage_epoch_1k", |b| {
        b.iter(|| train_first_stage(black_box(&data), &config).unwrap())
    });
}

fn bench_2sls(c: &mut Criterion) {
    let data = fixture_dataset(10_000, 11);
    c.bench_function("fit_2sls_10k", |b| {
        b.iter(|| fit_2sls(black_box(&data)).unwrap())
    });
}

criterion_group!(benches, bench_two_draw_gradient, bench_first_stage_epoch, bench_2sls);
criterion_main!(benches);
