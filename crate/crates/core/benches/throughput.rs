//! One worker vs the full pool on the hot data-parallel paths.
//!
//! `cargo bench -p emde` compares thread counts on the rayon build;
//! `cargo bench -p emde --no-default-features` runs the plain sequential
//! build of the same loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use emde::density::{brute_force_kde, density_sketch, Kernel};
use emde::par;
use emde::partition::{assign_codes, fit_dlsh};
use emde::sketch::{aggregate_items, decode_scores};
use emde::synth::GaussianMixture;
use emde::{Aggregator, Norm};

fn pools() -> [(&'static str, usize); 2] {
    [("1-thread", 1), ("all-threads", 0)]
}

fn benches(c: &mut Criterion) {
    let g = GaussianMixture::random(32, 8, 2.0, 1).unwrap();
    let data = g.sample_table(20_000, 2, "bench").unwrap();
    let queries = g.sample(200, 3);
    let rows: Vec<&[f64]> = data.rows().collect();
    let p = fit_dlsh(&data, 40, 8, 4).unwrap();
    let codes = assign_codes(&p, &data).unwrap();
    let bag: Vec<(&str, f64)> = codes.ids().iter().map(|id| (id.as_str(), 1.0)).collect();
    let sketch = density_sketch(&p, &data, None).unwrap().normalized(Norm::L1);

    let mut group = c.benchmark_group("throughput");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::new("kde_200x20k", name), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    brute_force_kde(&rows, &queries, Kernel::Laplacian, 10.0).unwrap()
                })
            })
        });
        group.bench_function(BenchmarkId::new("assign_codes_20k", name), |b| {
            b.iter(|| par::with_threads(threads, || assign_codes(&p, &data).unwrap()))
        });
        group.bench_function(BenchmarkId::new("density_sketch_20k", name), |b| {
            b.iter(|| par::with_threads(threads, || density_sketch(&p, &data, None).unwrap()))
        });
        group.bench_function(BenchmarkId::new("aggregate_items_20k", name), |b| {
            b.iter(|| par::with_threads(threads, || aggregate_items(&codes, &bag)))
        });
        group.bench_function(BenchmarkId::new("decode_scores_20k", name), |b| {
            b.iter(|| par::with_threads(threads, || decode_scores(&sketch, &codes, Aggregator::Gmean).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(throughput, benches);
criterion_main!(throughput);
