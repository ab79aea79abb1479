use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sparsenmt::sparse::{csr_matvec, dense_matvec, to_csr};
use sparsenmt_bench::{apply, pruned_case};

const SHAPES: [(usize, usize); 2] = [(512, 512), (512, 2048)];
const SPARSITIES: [f64; 4] = [0.0, 0.5, 0.9, 0.98];

fn matvec(c: &mut Criterion) {
    for (rows, cols) in SHAPES {
        let mut group = c.benchmark_group(format!("matvec_{rows}x{cols}"));
        for s in SPARSITIES {
            let (w, mask, x) = pruned_case(rows, cols, s, 7);
            let dense = apply(&w, &mask);
            let csr = to_csr(&w, &mask).unwrap();
            group.bench_with_input(BenchmarkId::new("dense", s), &s, |b, _| {
                b.iter(|| dense_matvec(black_box(&dense), black_box(&x)).unwrap())
            });
            group.bench_with_input(BenchmarkId::new("csr", s), &s, |b, _| {
                b.iter(|| csr_matvec(black_box(&csr), black_box(&x)).unwrap())
            });
        }
        group.finish();
    }
}

criterion_group!(benches, matvec);
criterion_main!(benches);
