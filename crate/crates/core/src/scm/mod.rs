//! Latent structural causal model: temporal graphs, acyclicity, linear and
//! nonlinear conditionals, and the spline noise flow.

pub mod acyclicity;
pub mod linear;
pub mod nonlinear;
pub mod spline;

pub use acyclicity::{acyclicity, acyclicity_on_tape, is_dag};
pub use linear::{
    latent_loglik_linear, latent_loglik_linear_on_tape, linear_mean, linear_residuals_on_tape,
    LinearScmParams, LinearScmVars, LN_2PI,
};
pub use nonlinear::{
    latent_loglik_nonlinear, latent_loglik_nonlinear_on_tape,
    latent_loglik_nonlinear_terms_on_tape, noise_spline_raw, nonlinear_mean,
    NoiseStats, NonlinearScmParams, NonlinearScmVars,
};
pub use spline::{
    spline_inverse_on_tape, split_spline_rows, SplineParams, SplineVarsRows, SPLINE_BINS,
    SPLINE_BOUND, SPLINE_RAW_PARAMS,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Which family of structural equations the latent model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScmVariant {
    Linear,
    Nonlinear,
}

/// Binary temporal adjacency of shape `(tau+1, D, D)`. Slice 0 holds
/// instantaneous edges and must be acyclic; entry `[k][j][d] = 1` is an edge
/// `j -> d` at lag `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraph {
    pub g: Tensor,
}

impl TemporalGraph {
    pub fn new(g: Tensor) -> Result<Self> {
        let s = g.shape();
        if s.len() != 3 || s[1] != s[2] || s[1] == 0 {
            return Err(Error::shape("temporal graph", format!("shape {s:?}")));
        }
        if let Some(bad) = g.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("temporal graph entries must be 0/1, got {bad}")));
        }
        let graph = Self { g };
        if !graph.instantaneous_is_dag() {
            return Err(Error::Validation("instantaneous slice has a cycle".to_string()));
        }
        Ok(graph)
    }

    pub fn empty(d: usize, tau: usize) -> Self {
        Self { g: Tensor::zeros(&[tau + 1, d, d]) }
    }

    pub fn tau(&self) -> usize {
        self.g.shape()[0] - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.g.shape()[1]
    }

    pub fn at(&self, lag: usize, from: usize, to: usize) -> bool {
        self.g.at(&[lag, from, to]) != 0.0
    }

    pub fn set(&mut self, lag: usize, from: usize, to: usize, on: bool) {
        self.g.set(&[lag, from, to], if on { 1.0 } else { 0.0 });
    }

    pub fn num_edges(&self) -> usize {
        self.g.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn instantaneous_slice(&self) -> Tensor {
        let d = self.num_nodes();
        let mut out = Tensor::zeros(&[d, d]);
        out.data_mut().copy_from_slice(&self.g.data()[..d * d]);
        out
    }

    pub fn instantaneous_is_dag(&self) -> bool {
        // The slice is square by construction.
        is_dag(&self.instantaneous_slice()).unwrap_or(false)
    }
}

/// Unnormalized graph log-prior: `-alpha * ||G||^2 - sigma_pen * h(G0)`,
/// where the norm runs over every lag slice. For binary samples the squared
/// norm is the edge count; for Bernoulli probabilities their sum.
pub fn graph_prior_logp(g: &Tensor, alpha: f64, sigma_pen: f64) -> Result<f64> {
    let s = g.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape("graph prior", format!("shape {s:?}")));
    }
    if alpha < 0.0 || sigma_pen < 0.0 {
        return Err(Error::domain("graph prior", "alpha and sigma_pen must be non-negative"));
    }
    let d = s[1];
    let sq: f64 = g.data().iter().map(|&v| v * v).sum();
    let mut inst = Tensor::zeros(&[d, d]);
    inst.data_mut().copy_from_slice(&g.data()[..d * d]);
    let h = acyclicity(&inst)?;
    Ok(-alpha * sq - sigma_pen * h)
}
