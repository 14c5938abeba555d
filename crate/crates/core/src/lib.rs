//! Variational discovery of latent temporal causal graphs from gridded time
//! series.
//!
//! The pipeline: synthesize (or load) observations on a spatial grid, fit a
//! latent-variable model whose latents follow a structural causal model with
//! lagged and instantaneous edges, and score the recovered graph and latent
//! series against ground truth.

pub mod autodiff;
pub mod error;
pub mod evalmetrics;
pub mod io;
pub mod nn;
pub mod scm;
pub mod spatial;
pub mod synthgen;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
