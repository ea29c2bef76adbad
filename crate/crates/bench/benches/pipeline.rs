use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use segpoint::data::{generate_labeled, standard_vocabulary, LoadedScene, Split};
use segpoint::geometry::{farthest_point_sample, knn};
use segpoint::gradcheck::random_cloud;
use segpoint::train::Trainer;
use segpoint::{ModelConfig, Precision, SegPoint, TrainConfig};

fn geometry(c: &mut Criterion) {
    let mut group = c.benchmark_group("geometry");
    for n in [1024, 4096] {
        let coords = random_cloud(n, 3, 1).unwrap().coords_f64();
        group.bench_with_input(BenchmarkId::new("fps_n_over_16", n), &coords, |b, pts| {
            b.iter(|| farthest_point_sample(pts, pts.len() / 16, 0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("knn16_self", n), &coords, |b, pts| {
            b.iter(|| knn(pts, pts, 16).unwrap())
        });
    }
    group.finish();
}

fn small_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.n_tokens = 64;
    cfg
}

fn model_paths(c: &mut Criterion) {
    let dtype = Precision::F32.dtype();
    let (scene, annotations) = generate_labeled(3, 2048).unwrap();
    let model = SegPoint::new(&small_model(), standard_vocabulary(), 3, dtype, 0).unwrap();
    let prep = model.prepare(&scene.cloud).unwrap();

    let mut group = c.benchmark_group("model_n2048");
    group.sample_size(10);
    group.bench_function("prepare_geometry", |b| b.iter(|| model.prepare(&scene.cloud).unwrap()));
    group.bench_function("encode_points", |b| b.iter(|| model.encode_points(&prep).unwrap()));

    let config = TrainConfig {
        model: small_model(),
        ..Default::default()
    };
    let data = [LoadedScene {
        split: Split::Train,
        scene,
        annotations,
    }];
    let model = SegPoint::new(&config.model, standard_vocabulary(), 3, dtype, 0).unwrap();
    let mut trainer = Trainer::new(&config, model, &data).unwrap();
    group.bench_function("train_step", |b| b.iter(|| trainer.step().unwrap()));
    let sample = trainer.samples[0].clone();
    group.bench_function("infer", |b| {
        b.iter(|| trainer.model.infer(&sample.prep, &sample.sample.prompt_ids).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry, model_paths);
criterion_main!(benches);
