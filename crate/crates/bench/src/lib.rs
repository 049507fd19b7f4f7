//! Fixtures shared by the benchmarks.

use rand::Rng;
use zeroal::{rng, DeepSetsConfig, DeepSetsModel, Matrix};

/// `rows × cols` matrix of uniform values in [-1, 1).
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::seeded(seed);
    let v = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, v).expect("shape matches")
}

/// Labels from the sign of the first two coordinates.
pub fn quadrant_labels(x: &Matrix) -> Vec<usize> {
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            usize::from(row[0] > 0.0) + 2 * usize::from(row.get(1).is_some_and(|&v| v > 0.0))
        })
        .collect()
}

/// Untrained surrogate at the desk sizes.
pub fn desk_deepsets(input_dim: usize, seed: u64) -> DeepSetsModel {
    let cfg = DeepSetsConfig { hidden: 64, set_dim: 64, ..DeepSetsConfig::default() };
    DeepSetsModel::new(input_dim, &cfg, seed).expect("valid config")
}
