use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use vda_bench::{images, rng};
use vda_core::baselines::{coral_transform, fit_stats};
use vda_core::data_io::{generate_toy, ToyGenConfig};
use vda_core::fusion::frame_features;
use vda_core::models::{build_rfnet, Network, NetworkConfig};
use vda_core::trainer::{Model, TrainConfig, TrainState};

fn toy_rfnet() -> Network {
    let cfg = NetworkConfig::toy();
    let init = Network::init_embedder(&cfg, &mut rng(3)).unwrap();
    build_rfnet(&cfg, init.params()).unwrap()
}

fn embedding(c: &mut Criterion) {
    let net = toy_rfnet();
    let batch = images(4, 32, 32);
    let mut group = c.benchmark_group("embed");
    group.bench_function("batch32", |b| {
        b.iter(|| black_box(net.embed_batch(&batch).unwrap()))
    });
    group.bench_function("frame_features32", |b| {
        b.iter(|| black_box(frame_features(&net, &batch).unwrap()))
    });
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let corpus = generate_toy(&ToyGenConfig {
        n_identities: 16,
        images_per_identity: 4,
        n_videos: 8,
        frames_per_video: 8,
        ..ToyGenConfig::default()
    })
    .unwrap();
    let rfnet = toy_rfnet();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    for model in [Model::C, Model::F] {
        let cfg = TrainConfig::preset(model);
        let mut state = TrainState::new(&cfg, &rfnet, &corpus.images, &corpus.videos).unwrap();
        group.bench_function(format!("step_{}", model.name()), |b| {
            b.iter(|| black_box(state.step(&corpus.images, &corpus.videos).unwrap()))
        });
    }
    group.finish();
}

fn coral(c: &mut Criterion) {
    let mut r = rng(5);
    let mut rows = |n: usize, shift: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..32).map(|_| r.gen_range(-1.0..1.0) + shift).collect())
            .collect()
    };
    let (video, still) = (rows(1200, 0.2), rows(320, 0.0));
    c.bench_function("coral_fit_k32", |b| {
        b.iter(|| {
            let t = coral_transform(
                &fit_stats(&video).unwrap(),
                &fit_stats(&still).unwrap(),
                None,
            )
            .unwrap();
            black_box(t)
        })
    });
}

criterion_group!(benches, embedding, train_step, coral);
criterion_main!(benches);
