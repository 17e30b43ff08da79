use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use solarnet_bench::{conv_input, emau_input, uniform};
use solarnet_core::emau::emau_forward;
use solarnet_core::tensor::Padding;
use solarnet_core::Tape;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

// Time per call should grow linearly in N at fixed K.
fn emau_scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("emau_forward");
    g.sample_size(20);
    for n in [4096, 8192, 16384, 32768] {
        let input = emau_input(n, 64, 3);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::new("k64_t3", n), &input, |b, e| {
            b.iter(|| emau_forward(black_box(&e.x), &e.bases, &e.cfg, &e.params).unwrap())
        });
    }
    g.finish();
}

fn emau_bases(c: &mut Criterion) {
    let mut g = c.benchmark_group("emau_forward_k");
    g.sample_size(20);
    for k in [16, 64, 256] {
        let input = emau_input(4096, k, 3);
        g.bench_with_input(BenchmarkId::new("n4096_t3", k), &input, |b, e| {
            b.iter(|| emau_forward(black_box(&e.x), &e.bases, &e.cfg, &e.params).unwrap())
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for (cin, cout) in [(3, 16), (16, 32)] {
        let (x, w) = conv_input(4, cin, cout, 64);
        g.bench_function(format!("b4_{cin}to{cout}_64px"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let wv = tape.leaf(w.clone());
                let y = tape.conv2d(xv, wv, None, 1, Padding::Same).unwrap();
                let s = tape.sum(y).unwrap();
                tape.backward(s).unwrap()
            })
        });
    }
    g.finish();
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, bm) = (uniform(&[n, n], 6), uniform(&[n, n], 7));
        g.throughput(Throughput::Elements((n * n * n) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (av, bv) = (tape.constant(a.clone()), tape.constant(bm.clone()));
                let y = tape.matmul(av, bv).unwrap();
                black_box(tape.value(y).sum())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, emau_scaling, emau_bases, conv, matmul);
criterion_main!(benches);
