//! Dense latent tree image models.
//!
//! A dense latent tree ties many copies of one latent variable together so
//! that overlapping image parts still form a tree. Belief propagation over
//! the unique copies stays exact, which gives tractable likelihoods,
//! gradients and conditional samples for lattice-structured images.
//!
//! Modules, bottom to top:
//! - [`topology`]: layer shapes, kernel adjacency, duplicate counts
//! - [`inference`]: the upward message pass and log-likelihood
//! - [`learning`]: score parameterization, gradients, stochastic training
//! - [`sampling`]: constrained downward sampling and in-painting
//! - [`oracle`]: slow reference implementations for cross-checking
//! - [`data`]: IDX and PGM reading/writing, quantization, corruption masks
//! - [`config`] / [`checkpoint`]: run files and trained-model files
//! - [`cli`]: the command-line front end

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod learning;
pub mod math;
pub mod oracle;
pub mod sampling;
pub mod seed;
pub mod topology;

pub use error::{Error, Result};
pub use topology::{build_topology, KernelSpec, LayerShape, ModelTopology};
