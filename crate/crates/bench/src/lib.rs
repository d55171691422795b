//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use pod_core::sim::gen_sdr_model;
use pod_core::Dataset;

pub const SEED: u64 = 20240917;

/// A draw from the single-index model with `n` rows.
pub fn sdr_fixture(n: usize) -> Dataset {
    gen_sdr_model(1, n, 0.5, SEED).expect("fixture parameters are valid")
}

/// A symmetric positive definite `p x p` matrix.
pub fn spd_fixture(p: usize) -> Array2<f64> {
    let a = Array2::from_shape_fn((p, p), |(i, j)| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
    a.t().dot(&a) + Array2::<f64>::eye(p)
}
