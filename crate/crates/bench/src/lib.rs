//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reltopo_core::numerics::Tensor;
use reltopo_core::semantic::{ConfidenceVector, NodeFeatureSet, Stage};

/// `rows×cols` matrix with entries uniform in `[lo, hi)`.
pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

/// Symmetric nonnegative `n×n` matrix.
pub fn symmetric_nonneg(n: usize, seed: u64) -> Tensor {
    let a = uniform_matrix(n, n, 0.0, 1.0, seed);
    let mut s = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            s.data_mut()[i * n + j] = a.at(&[i, j]) + a.at(&[j, i]);
        }
    }
    s
}

/// Relation-stage node features for `k` keypoints of width `c`.
pub fn node_set(k: usize, c: usize, seed: u64) -> NodeFeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb);
    let beta = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
    NodeFeatureSet::new(
        uniform_matrix(k + 1, c, -1.0, 1.0, seed),
        ConfidenceVector::from_local(beta).expect("values in [0, 1)"),
        Stage::Relation,
    )
    .expect("matching shapes")
}
