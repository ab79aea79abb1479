//! Inputs shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsenmt::pruning::{magnitude_mask, Mask};
use sparsenmt::Tensor;

/// A uniform random `rows x cols` weight matrix, its magnitude mask at
/// `sparsity`, and a random input vector.
pub fn pruned_case(rows: usize, cols: usize, sparsity: f64, seed: u64) -> (Tensor<f32>, Mask, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let w = Tensor::new(vec![rows, cols], data).expect("shape matches data");
    let x = (0..cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mask = magnitude_mask(&w, sparsity);
    (w, mask, x)
}

/// `w` with the pruned entries set to zero.
pub fn apply(w: &Tensor<f32>, mask: &Mask) -> Tensor<f32> {
    let data = w.data().iter().zip(mask.keep()).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}
