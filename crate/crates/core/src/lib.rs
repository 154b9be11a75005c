//! Disentanglement-learning laboratory.
//!
//! The crate bundles a small reverse-mode autodiff engine with the
//! convolutional encoder/decoder stacks used by the models, five VAE training
//! objectives, the multi-encoder staged trainer with backward-information
//! scaling, an annealing test that locates information freezing points, and
//! count-based mutual-information metrics (MIG, NMI1/NMI2).

pub mod annealing;
pub mod autodiff;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod traversal;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
