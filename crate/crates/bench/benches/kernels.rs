use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use dynmoe::moe::{select_top_k, select_top_p};
use dynmoe::numcore::matmul;
use dynmoe::Rng;
use dynmoe_bench::{desk_pool, gate_row, random_tokens};
use std::hint::black_box;

fn routing(c: &mut Criterion) {
    let mut group = c.benchmark_group("routing");
    for e in [4, 9, 16] {
        let mut rng = Rng::new(e as u64);
        let rows: Vec<Vec<f64>> = (0..256).map(|_| gate_row(e, &mut rng)).collect();
        group.bench_with_input(BenchmarkId::new("top_p", e), &rows, |b, rows| {
            b.iter(|| rows.iter().map(|r| select_top_p(black_box(r), 0.7).unwrap().selected.len()).sum::<usize>())
        });
        group.bench_with_input(BenchmarkId::new("top_k2", e), &rows, |b, rows| {
            b.iter(|| rows.iter().map(|r| select_top_k(black_box(r), 2).unwrap().selected.len()).sum::<usize>())
        });
    }
    group.finish();
}

fn layer_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("moe_forward");
    for tokens in [64, 256] {
        let pool = desk_pool(32, 1);
        let x = random_tokens(tokens, 32, 2);
        group.bench_with_input(BenchmarkId::from_parameter(tokens), &x, |b, x| b.iter(|| pool.forward(black_box(x)).unwrap()));
    }
    group.finish();
}

fn dense_matmul(c: &mut Criterion) {
    let a = random_tokens(256, 32, 3);
    let w = random_tokens(32, 128, 4);
    c.bench_function("matmul_256x32x128", |b| {
        b.iter_batched(|| (a.clone(), w.clone()), |(a, w)| matmul(&a, &w).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, routing, layer_forward, dense_matmul);
criterion_main!(benches);
