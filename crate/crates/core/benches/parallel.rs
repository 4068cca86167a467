//! Sequential vs data-parallel execution of the hot loops. Without the
//! `parallel` feature both variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wmark_core::capacity::{simulate_collisions, CapacityParams};
use wmark_core::data::SyntheticTaskSpec;
use wmark_core::exec::Exec;
use wmark_core::nn::{desk_classifier, LossSpec, Model};

fn model_passes(c: &mut Criterion) {
    let spec = SyntheticTaskSpec::default();
    let data = spec.generate(128, 1).unwrap();
    let model = Model::new(spec.image_shape(), desk_classifier(&spec.image_shape(), 10).unwrap(), 1).unwrap();
    let loss = LossSpec::cross_entropy(data.labels());
    let mut group = c.benchmark_group("desk_classifier_b128");
    for exec in [Exec::Sequential, Exec::Parallel] {
        let name = format!("{exec:?}");
        group.bench_with_input(BenchmarkId::new("forward", &name), &exec, |b, &e| {
            b.iter(|| black_box(model.forward_with(data.images(), e).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("grad", &name), &exec, |b, &e| {
            b.iter(|| black_box(model.grad_with(data.images(), &loss, e).unwrap()))
        });
    }
    group.finish();
}

fn collisions(c: &mut Criterion) {
    let p = CapacityParams::default();
    let mut group = c.benchmark_group("simulate_collisions_j4_1000");
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| black_box(simulate_collisions(4, &p, 1000, 7, e).unwrap()))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = model_passes, collisions
}
criterion_main!(benches);
