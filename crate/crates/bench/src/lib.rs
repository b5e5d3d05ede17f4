//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use pertvae::RngStream;

/// Standard normal matrix from a fixed seed.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = RngStream::new(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.normal())
}
