//! Latent-direction editing laboratory.
//!
//! Learns one global semantic direction per attribute together with an
//! instance-aware intensity predictor and per-layer gates, trains them with
//! sparsity / direction / neighborhood / classification / identity losses,
//! and verifies the learned behavior (attribute flips, identity
//! preservation, direction sparsity, disentanglement) against a synthetic
//! differentiable world whose ground-truth edit directions are planted at
//! construction.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;
