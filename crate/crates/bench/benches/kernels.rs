use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mbert_core::metrics::auroc;
use mbert_core::numerics::{normal_matrix, softmax_rows};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = normal_matrix(n, 64, 1.0, &mut rng);
        let b = normal_matrix(64, 64, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = normal_matrix(256, 256, 1.0, &mut rng);
    c.bench_function("softmax_rows 256x256", |b| {
        b.iter(|| softmax_rows(black_box(&m)))
    });
}

fn auroc_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<u8> = (0..10_000).map(|_| rng.gen_range(0..2)).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&y| rng.gen::<f64>() + 0.5 * f64::from(y))
        .collect();
    c.bench_function("auroc n=10000", |b| {
        b.iter(|| auroc(black_box(&scores), black_box(&labels)).unwrap())
    });
}

criterion_group!(benches, matmul, softmax, auroc_bench);
criterion_main!(benches);
