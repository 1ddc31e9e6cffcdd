//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssdl_core::{DMatrix, DVector};

/// Entries uniform in `[-1, 1)`.
pub fn random_vector(p: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// An `m x p` dictionary with unit-norm columns.
pub fn random_dictionary(m: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = DMatrix::from_fn(m, p, |_, _| rng.gen_range(-1.0..1.0));
    for mut c in d.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    d
}

/// A signal built from a few atoms plus small noise.
pub fn sparse_signal(d: &DMatrix<f64>, k: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = DVector::from_fn(d.nrows(), |_, _| 0.01 * rng.gen_range(-1.0..1.0));
    for _ in 0..k {
        let j = rng.gen_range(0..d.ncols());
        y.axpy(rng.gen_range(0.5..1.5), &d.column(j), 1.0);
    }
    y
}
