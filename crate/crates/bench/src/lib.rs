//! Shared fixtures for the benchmarks.

use deft_core::datasets::{generate_grid_dataset, FactorSchema, LabeledDataset};
use deft_core::rng;
use deft_core::trainer::standard_normal;
use deft_core::{Real, Tensor};

/// Gaussian tensor drawn from a fixed stream.
pub fn gaussian<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    standard_normal(shape, &mut rng::stream(seed, "bench", 0))
}

/// Positions-only sprite set, `n x n` images at `resolution`.
pub fn positions(n: usize, resolution: usize) -> LabeledDataset {
    let schema = FactorSchema::new(&[("posX", n), ("posY", n)]).expect("valid schema");
    generate_grid_dataset(&schema, resolution).expect("renderable")
}
