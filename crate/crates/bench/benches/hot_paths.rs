use causalx_bench::{batch, candidate_set, clustered_points, model, score_parts};
use causalx_core::explain::hdbscan::hdbscan;
use causalx_core::{HdbscanParams, PopularityTable};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn bench_hdbscan(c: &mut Criterion) {
    let mut group = c.benchmark_group("hdbscan");
    group.sample_size(10);
    for n in [200, 800] {
        let pts = clustered_points(n, 64, 12, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &pts, |b, pts| {
            b.iter(|| hdbscan(black_box(pts), HdbscanParams::default()))
        });
    }
    group.finish();
}

fn bench_selection(c: &mut Criterion) {
    let mut group = c.benchmark_group("select");
    for g in [50, 500] {
        let parts = score_parts(20, g, 2);
        let cands = candidate_set(g);
        group.bench_with_input(BenchmarkId::from_parameter(g), &parts, |b, parts| {
            b.iter(|| parts.select(black_box(0.5), 3, &cands).unwrap())
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let m = model(500, 2000, 100);
    let items: Vec<String> = (0..20).map(|i| format!("i{i}")).collect();
    let popularity = PopularityTable {
        freq: Default::default(),
        score: items.iter().enumerate().map(|(k, i)| (i.clone(), k as f64 / 20.0)).collect(),
        head: Default::default(),
        tail: Default::default(),
    };
    c.bench_function("score_episode_20x100", |b| {
        b.iter(|| causalx_core::ScoreParts::compute(&m, "u3", black_box(&items), &popularity).unwrap())
    });
    let samples = batch(&m, 256, 3);
    c.bench_function("batch_gradients_256", |b| {
        b.iter(|| m.batch_gradients(black_box(&samples), 0.5).unwrap())
    });
}

criterion_group!(benches, bench_hdbscan, bench_selection, bench_model);
criterion_main!(benches);
