use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use dycklab::generator::{build_generator, next_token, prefix_readouts};
use dycklab::recognizer::{build_recognizer, recognize};
use dycklab::NumericConfig;
use dycklab_bench::members;

fn recognizer(c: &mut Criterion) {
    let mut group = c.benchmark_group("recognize");
    group.sample_size(20);
    let net = build_recognizer(8, 10, 1402).unwrap();
    for len in [100, 400, 1400] {
        let s = members(8, 10, len - 10, len, 1).remove(0);
        group.throughput(Throughput::Elements(s.len() as u64));
        for (name, cfg) in [
            ("f64", NumericConfig::float64()),
            ("fp15", NumericConfig::fixed(15)),
        ] {
            group.bench_with_input(BenchmarkId::new(name, len), &s, |b, s| {
                b.iter(|| recognize(&net, s, &cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn generator(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate");
    group.sample_size(20);
    let net = build_generator(8, 10, 1402).unwrap();
    let cfg = NumericConfig::float64();
    for len in [100, 400, 1400] {
        let s = members(8, 10, len - 10, len, 1).remove(0);
        let prefix = &s[..s.len() - 1];
        group.throughput(Throughput::Elements(prefix.len() as u64));
        group.bench_with_input(BenchmarkId::new("next_token", len), prefix, |b, p| {
            b.iter(|| next_token(&net, p, &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("all_prefixes", len), prefix, |b, p| {
            b.iter(|| prefix_readouts(&net, p, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, recognizer, generator);
criterion_main!(benches);
