use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array3;
use priorseg_core::augmentation::{build_affine, foreground_stats, pathology_mixup, warp_labels, DEFAULT_FOREGROUND};
use priorseg_core::data_io::{generate_cohort, prepare_slices, PhantomSpec, SliceSample};
use priorseg_core::losses::{total_loss, total_loss_grad, PenaltyConfig, WeightVector};
use priorseg_core::model::{Model, ModelConfig};
use priorseg_core::training::{batch_gradient, make_batch, TrainConfig};
use priorseg_core::ProbMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn phantom_slices(size: usize) -> Vec<SliceSample> {
    let spec = PhantomSpec::for_size(size);
    prepare_slices(&generate_cohort(&spec, 4, 0).unwrap())
        .unwrap()
        .into_iter()
        .filter(|s| s.labels.iter().any(|&l| l != 0))
        .collect()
}

fn random_probmap(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ProbMap {
    let mut a = Array3::from_shape_fn((5, h, w), |_| rng.random_range(0.01..1.0));
    for mut px in a.lanes_mut(ndarray::Axis(0)) {
        let s = px.sum();
        px.mapv_inplace(|v| v / s);
    }
    ProbMap::new(a).unwrap()
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = random_probmap(&mut rng, 128, 128);
    let y = random_probmap(&mut rng, 128, 128);
    let w = WeightVector::uniform(5);
    let cfg = PenaltyConfig::default();
    c.bench_function("total_loss 128x128", |b| b.iter(|| total_loss(&p, &y, &w, &cfg, 0.01).unwrap()));
    c.bench_function("total_loss_grad 128x128", |b| {
        b.iter(|| total_loss_grad(&p, &y, &w, &cfg, 0.01).unwrap())
    });
}

fn augmentation(c: &mut Criterion) {
    let slices = phantom_slices(128);
    let (fixed, moving) = (&slices[0], &slices[slices.len() - 1]);
    let t = build_affine(
        &foreground_stats(fixed.labels.view(), &DEFAULT_FOREGROUND).unwrap(),
        &foreground_stats(moving.labels.view(), &DEFAULT_FOREGROUND).unwrap(),
    )
    .unwrap();
    c.bench_function("warp_labels 128x128", |b| b.iter(|| warp_labels(moving.labels.view(), &t).unwrap()));
    c.bench_function("pathology_mixup 128x128", |b| {
        b.iter(|| pathology_mixup(fixed, moving, 0.5).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let slices = phantom_slices(64);
    let model = Model::new(ModelConfig::small(3, 16), 0).unwrap();
    let image = slices[0].image.view();
    c.bench_function("segmentation_forward 64x64 depth3 base16", |b| {
        b.iter(|| model.segmentation_forward(image).unwrap())
    });
    c.bench_function("weight_forward 64x64", |b| b.iter(|| model.weight_forward(image).unwrap()));
    let cfg = TrainConfig {
        batch_size: 2,
        model: ModelConfig::small(3, 16),
        ..TrainConfig::default()
    };
    let batch = make_batch(&slices, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("batch_gradient 2x64x64", |b| b.iter(|| batch_gradient(&model, &batch, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, losses, augmentation, model);
criterion_main!(benches);
