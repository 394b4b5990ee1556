use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use exclusion_core::dataset::{generate_synthetic, partition_disjoint, Sample, Shape};
use exclusion_core::learner::{Architecture, Classifier};
use exclusion_core::par;
use exclusion_core::signature::{build_signature_index, exact_digest, perceptual_hash, LookupMode};

fn batch_prediction(c: &mut Criterion) {
    let shape = Shape::new(8, 8, 3).unwrap();
    let data = generate_synthetic(10, 100, shape, 1.0, 1).unwrap();
    let model = Classifier::new(Architecture::mlp(&[128]), shape.len(), 10, 2).unwrap();
    let samples = data.samples();
    let mut group = c.benchmark_group("predict_1000");
    group.bench_function(BenchmarkId::new("par", par::is_parallel()), |b| {
        b.iter(|| par::map(samples, |s| model.predict_proba(black_box(s)).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(samples, |s| model.predict_proba(black_box(s)).unwrap()))
    });
    group.finish();
}

fn signature_pass(c: &mut Criterion) {
    let shape = Shape::new(32, 32, 3).unwrap();
    let data = generate_synthetic(10, 50, shape, 1.0, 3).unwrap();
    let partition = partition_disjoint(&data, 5, 4).unwrap();
    let samples = data.samples();
    let sig = |s: &Sample| (exact_digest(s), perceptual_hash(s));
    let mut group = c.benchmark_group("signatures_500");
    group.bench_function(BenchmarkId::new("par", par::is_parallel()), |b| b.iter(|| par::map(samples, sig)));
    group.bench_function("sequential", |b| b.iter(|| par::map_sequential(samples, sig)));
    group.bench_function("index_build", |b| {
        b.iter(|| build_signature_index(black_box(&partition), LookupMode::HashTable))
    });
    group.finish();
}

criterion_group!(benches, batch_prediction, signature_pass);
criterion_main!(benches);
