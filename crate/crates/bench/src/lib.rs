//! Fixtures shared by the benchmarks.

use duet_core::rng;
use duet_core::Tensor;

/// `rows×cols` standard normal matrix.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut g = rng::seeded(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng::normal(&mut g)).collect()).expect("sized")
}
