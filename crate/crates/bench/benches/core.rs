use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pod_bench::{sdr_fixture, spd_fixture, SEED};
use pod_core::numerics::sym_eigen;
use pod_core::{select_order, LearnerSpec, Loss, PODConfig, ReducerSpec};
use std::hint::black_box;

fn eigen(c: &mut Criterion) {
    let mut group = c.benchmark_group("sym_eigen");
    for p in [10, 50, 200] {
        let s = spd_fixture(p);
        group.bench_with_input(BenchmarkId::from_parameter(p), &s, |b, s| b.iter(|| sym_eigen(black_box(s)).unwrap()));
    }
    group.finish();
}

fn reducers(c: &mut Criterion) {
    let data = sdr_fixture(400);
    let mut group = c.benchmark_group("reducer_fit");
    for spec in [ReducerSpec::Pca { standardize: false }, ReducerSpec::Sir { slices: 10 }, ReducerSpec::Dr { slices: 4 }] {
        group.bench_function(spec.to_string(), |b| b.iter(|| spec.fit(black_box(&data), 8).unwrap()));
    }
    group.finish();
}

fn order_selection(c: &mut Criterion) {
    let data = sdr_fixture(200);
    let mut group = c.benchmark_group("select_order");
    group.sample_size(10);
    for learners in [vec![LearnerSpec::Ols { ridge: 0.0 }], vec![LearnerSpec::Ols { ridge: 0.0 }, LearnerSpec::DEFAULT_TREE]] {
        let mut config = PODConfig::new(Loss::Squared, ReducerSpec::Sir { slices: 10 });
        config.learners = learners;
        config.seed = SEED;
        let name = config.learners.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        group.bench_function(name, |b| b.iter(|| select_order(black_box(&data), &config).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, eigen, reducers, order_selection);
criterion_main!(benches);
