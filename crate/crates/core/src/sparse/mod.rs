//! CSR storage of pruned weights, sparse kernels, sparse greedy decoding
//! and dense-vs-sparse timing.

mod csr;

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use csr::CsrMatrix;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{self, Bound, ModelParams, TransformerConfig};
use crate::pruning::{magnitude_mask, Mask, SparsityMasks};

pub const WARMUP_ITERATIONS: usize = 10;
pub const MIN_REPEATS: usize = 30;

pub fn to_csr<T: Scalar>(dense: &Tensor<T>, mask: &Mask) -> Result<CsrMatrix<T>> {
    CsrMatrix::from_masked(dense, Some(mask))
}

pub fn csr_matvec<T: Scalar>(m: &CsrMatrix<T>, x: &[T]) -> Result<Vec<T>> {
    m.matvec(x)
}

pub fn csr_matmul<T: Scalar>(m: &CsrMatrix<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    m.matmul(x)
}

/// Row-major dense `y = W x`, the baseline the CSR kernel is timed against.
pub fn dense_matvec<T: Scalar>(w: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    if w.rank() != 2 || w.shape()[1] != x.len() {
        return Err(Error::Shape {
            op: "dense_matvec",
            left: w.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    let cols = x.len();
    Ok(w.data()
        .chunks(cols)
        .map(|row| row.iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
        .collect())
}

/// Greedy decoding with every prunable matrix in CSR form. Produces the
/// same tokens as [`model::decode_greedy`] on the masked weights, up to
/// argmax ties within the shared tolerance band.
pub fn sparse_decode<T: Scalar>(
    config: &TransformerConfig,
    params: &ModelParams<T>,
    masks: &SparsityMasks,
    sources: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let vocab = model::vocab_size(config, params)?;
    let sparse = model::sparse_weights(params, masks)?;
    model::greedy_with(
        config,
        vocab,
        &|tape| Ok(Bound::with_sparse(tape, params, &sparse)),
        sources,
        max_len,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub shape: String,
    pub sparsity: f64,
    pub kernel: &'static str,
    pub mean_ns: f64,
    pub std_ns: f64,
}

fn time_ns(repeats: usize, mut f: impl FnMut()) -> (f64, f64) {
    for _ in 0..WARMUP_ITERATIONS {
        f();
    }
    let samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / repeats as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
    (mean, var.sqrt())
}

/// Times dense and CSR mat-vec for every (shape, sparsity) cell on random
/// magnitude-pruned matrices. Two rows per cell, dense first.
pub fn benchmark_suite(
    shapes: &[(usize, usize)],
    sparsities: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats < MIN_REPEATS {
        return Err(Error::Invalid(format!("at least {MIN_REPEATS} repeats required, got {repeats}")));
    }
    if let Some(s) = sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(Error::Invalid(format!("sparsity {s} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(shapes.len() * sparsities.len() * 2);
    for &(r, c) in shapes {
        let w = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
        let x: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        for &s in sparsities {
            let mask = magnitude_mask(&w, s);
            let masked = Tensor::new(
                vec![r, c],
                w.data().iter().zip(mask.keep()).map(|(&v, &k)| if k { v } else { 0.0 }).collect(),
            )?;
            let csr = to_csr(&w, &mask)?;
            let shape = format!("{r}x{c}");
            let (mean_ns, std_ns) = time_ns(repeats, || {
                black_box(dense_matvec(black_box(&masked), black_box(&x)).unwrap());
            });
            rows.push(BenchRow { shape: shape.clone(), sparsity: s, kernel: "dense", mean_ns, std_ns });
            let (mean_ns, std_ns) = time_ns(repeats, || {
                black_box(csr.matvec(black_box(&x)).unwrap());
            });
            rows.push(BenchRow { shape, sparsity: s, kernel: "csr", mean_ns, std_ns });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
