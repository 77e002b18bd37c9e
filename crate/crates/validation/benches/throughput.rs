use criterion::{criterion_group, criterion_main, Criterion, Throughput};

use elspin::tagstore::{cross_correlate, fold};
use elspin_validation::poisson_stream;

fn bench_fold(c: &mut Criterion) {
    let s = poisson_stream(1, 1e4, 100.0, 0, 1);
    let mut g = c.benchmark_group("fold");
    g.throughput(Throughput::Elements(s.len() as u64));
    g.bench_function("1e6 tags, 4 us period, 1 ns bins", |b| {
        b.iter(|| fold(&s, 4e-6, 1e-9, None).unwrap())
    });
    g.finish();
}

fn bench_cross(c: &mut Criterion) {
    let a = poisson_stream(2, 1e4, 100.0, 0, 1);
    let b = poisson_stream(3, 1e4, 100.0, 1, 1);
    let mut g = c.benchmark_group("cross_correlate");
    g.sample_size(10);
    g.throughput(Throughput::Elements((a.len() + b.len()) as u64));
    g.bench_function("2 x 1e6 tags, n_max 20", |bench| {
        bench.iter(|| cross_correlate(&a, &b, 4e-6, 40e-9, 20).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_fold, bench_cross);
criterion_main!(benches);
