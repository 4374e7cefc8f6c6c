use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use travmap_core::eval::binary_metrics;
use travmap_core::geo_losses::ssi_loss;
use travmap_core::geometry::pseudo_labels;
use travmap_core::model::{
    decode, extract_features, infer, train, Objective, TokenBank, TrainConfig, TrainingSample,
};
use travmap_core::pdt_losses::{pdt_loss, HypothesisSet, PerspectiveConfig};
use travmap_core::scenes::{generate_dataset, generate_scene, Preset, SceneParams};
use travmap_core::uncertainty::UncertaintyParams;

const SIZE: usize = 64;

fn scene_generation(c: &mut Criterion) {
    let params = SceneParams::preset(Preset::Mixed, 1, SIZE, SIZE);
    c.bench_function("generate_scene mixed 64x64", |b| {
        b.iter(|| generate_scene(black_box(&params)).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let scene = generate_scene(&SceneParams::preset(Preset::Mixed, 2, SIZE, SIZE)).unwrap();
    let bank = TokenBank::init(Default::default(), 0).unwrap();
    let features = extract_features(&scene.rgb).unwrap();
    let params = UncertaintyParams::default();

    c.bench_function("extract_features 64x64", |b| {
        b.iter(|| extract_features(black_box(&scene.rgb)).unwrap())
    });
    c.bench_function("decode 64x64", |b| {
        b.iter(|| decode(&bank, black_box(&features)).unwrap())
    });
    c.bench_function("infer 64x64", |b| {
        b.iter(|| infer(&bank, black_box(&scene.rgb), &params).unwrap())
    });
}

fn losses_and_geometry(c: &mut Criterion) {
    let scene = generate_scene(&SceneParams::preset(Preset::Mixed, 3, SIZE, SIZE)).unwrap();
    let bank = TokenBank::init(Default::default(), 0).unwrap();
    let logits = decode(&bank, &extract_features(&scene.rgb).unwrap())
        .unwrap()
        .semantic_logits;
    let hypotheses = HypothesisSet::new(logits, PerspectiveConfig::default_triple()).unwrap();

    c.bench_function("pdt_loss 64x64", |b| {
        b.iter(|| pdt_loss(black_box(&hypotheses), &scene.label).unwrap())
    });
    let shifted = scene.depth.map(|d| 0.5 * d + 1.0).unwrap();
    c.bench_function("ssi_loss 64x64", |b| {
        b.iter(|| ssi_loss(black_box(&shifted), &scene.depth).unwrap())
    });
    c.bench_function("pseudo_labels 64x64", |b| {
        b.iter(|| pseudo_labels(black_box(&scene.depth), &scene.label, 3.0).unwrap())
    });
    let score = scene.label.clone();
    c.bench_function("binary_metrics 64x64", |b| {
        b.iter(|| binary_metrics(black_box(&score), &scene.label, 0.5).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let scenes = generate_dataset(Preset::Mixed, 4, 16, SIZE, SIZE).unwrap();
    let samples: Vec<TrainingSample> = scenes
        .iter()
        .map(|s| TrainingSample::new(&s.rgb, &s.depth, &s.label, 3.0).unwrap())
        .collect();
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one epoch, 16 scenes 64x64", |b| {
        b.iter_batched(
            || samples.clone(),
            |s| train(&s, &config, &Objective::default()).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(
    benches,
    scene_generation,
    forward,
    losses_and_geometry,
    training
);
criterion_main!(benches);
