use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use fusekit_bench::normal_values;
use fusekit_core::quantile::{exact_quartiles, global_quartiles};

fn bench_quartiles(c: &mut Criterion) {
    let mut g = c.benchmark_group("exact_quartiles");
    for n in [1_000usize, 100_000, 1_000_000] {
        let v: Vec<f64> = normal_values(3, 0, n).into_iter().map(f64::from).collect();
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &v, |b, v| b.iter(|| exact_quartiles(v).unwrap()));
    }
    g.finish();

    let parts: Vec<Vec<f64>> = (0..8)
        .map(|s| normal_values(4, s, 250_000).into_iter().map(f64::from).collect())
        .collect();
    c.bench_function("global_quartiles/8x250000", |b| b.iter(|| global_quartiles(&parts, 1 << 31).unwrap()));
}

criterion_group!(benches, bench_quartiles);
criterion_main!(benches);
