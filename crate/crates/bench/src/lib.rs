//! Seeded inputs shared by the benchmarks.

use rand::Rng;
use sicdn_core::rng::{rng, Stream};
use sicdn_core::Tensor;

/// Uniform `[-1, 1)` tensor of the given shape.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed, Stream::Noise, 0);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// Rows of a random `[rows, width]` matrix.
pub fn random_rows(rows: usize, width: usize, seed: u64) -> Vec<Vec<f32>> {
    let t = random_tensor(&[rows, width], seed);
    (0..rows).map(|i| t.row(i).to_vec()).collect()
}
