//! Deterministic MLP and binary-network training with hyperplane-geometry audits.
//!
//! The crate trains small multilayer perceptrons (ReLU, htanh, or binary
//! sign/STE) from scratch, initializes biases uniformly on `[-λ, λ]`, and
//! measures how a layer's hyperplanes split the data: how many planes each
//! sample activates, how many samples each plane sees, and how much the
//! planes' activated sets overlap.
//!
//! Everything is seeded and reductions run in a fixed order, so every run
//! replays bit-for-bit.

pub mod activations;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod init;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;

pub use activations::ActivationKind;
pub use data::Dataset;
pub use error::{Error, Result};
pub use geometry::{ActivationMask, GeometryReport};
pub use init::InitConfig;
pub use network::{ArchSpec, Network};
pub use tensor::Matrix;
pub use train::{OptimizerConfig, TrainRecord};
