use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use spatialgan::analytics::{kde_hotspots, Bandwidth};
use spatialgan::metrics::{chamfer_distance, emd_exact, uniform_sample};

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);

    let mut g = c.benchmark_group("chamfer");
    for n in [1_000, 7_500] {
        let a = uniform_sample(n, 2, &mut rng);
        let b = uniform_sample(n, 2, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| chamfer_distance(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("emd");
    g.sample_size(10);
    for n in [250, 1_000] {
        let a = uniform_sample(n, 2, &mut rng);
        let b = uniform_sample(n, 2, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| emd_exact(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("kde_hotspots");
    g.sample_size(10);
    let pts = uniform_sample(7_500, 2, &mut rng);
    for grid in [64, 256] {
        g.bench_with_input(BenchmarkId::from_parameter(grid), &grid, |bench, &grid| {
            bench.iter(|| kde_hotspots(black_box(&pts), grid, Bandwidth::Scott).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, metrics);
criterion_main!(benches);
