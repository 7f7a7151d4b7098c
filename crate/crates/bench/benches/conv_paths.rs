use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dictconv_bench::layers;
use dictconv_core::{
    accumulate, conv2d_cp, conv2d_dict, conv2d_direct, cp_als, extract_blocks, kmeans, precompute_dot_table, AlsOptions,
    KMeansOptions,
};

fn convolution(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv");
    group.sample_size(20);
    for layer in layers() {
        group.bench_with_input(BenchmarkId::new("direct", layer.name), &layer, |b, l| {
            b.iter(|| conv2d_direct(black_box(&l.input), black_box(&l.kernel)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dict", layer.name), &layer, |b, l| {
            b.iter(|| conv2d_dict(black_box(&l.input), black_box(&l.quantized)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("cp", layer.name), &layer, |b, l| {
            b.iter(|| conv2d_cp(black_box(&l.input), black_box(&l.factors)).unwrap())
        });
    }
    group.finish();
}

fn dict_stages(c: &mut Criterion) {
    let mut group = c.benchmark_group("dict-stages");
    group.sample_size(20);
    for layer in layers() {
        let dict = layer.quantized.dictionary();
        group.bench_with_input(BenchmarkId::new("dot-table", layer.name), &layer, |b, l| {
            b.iter(|| precompute_dot_table(black_box(&l.input), dict).unwrap())
        });
        let table = precompute_dot_table(&layer.input, dict).unwrap();
        group.bench_with_input(BenchmarkId::new("accumulate", layer.name), &layer, |b, l| {
            b.iter(|| accumulate(black_box(&table), l.quantized.order()).unwrap())
        });
    }
    group.finish();
}

fn fitting(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    for layer in layers() {
        let blocks = extract_blocks(&layer.kernel, layer.quantized.block_len()).unwrap();
        let opts = KMeansOptions { restarts: 1, ..KMeansOptions::with_seed(1) };
        group.bench_with_input(BenchmarkId::new("kmeans", layer.name), &blocks, |b, blocks| {
            b.iter(|| kmeans(black_box(blocks), 32, &opts).unwrap())
        });
        let als = AlsOptions { max_iters: 20, rel_fit_tol: 0.0, restarts: 1, ..AlsOptions::with_seed(1) };
        group.bench_with_input(BenchmarkId::new("als-20-sweeps", layer.name), &layer, |b, l| {
            b.iter(|| cp_als(black_box(&l.kernel), 8, &als).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, convolution, dict_stages, fitting);
criterion_main!(benches);
