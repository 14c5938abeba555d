//! Linear structural equations over the latent series.
//!
//! Each node is a weighted sum of its active parents across lags plus
//! independent Gaussian noise with a learnable per-node log-variance. The
//! plain entry points operate on one time step and serve as oracles for the
//! batched tape versions used inside the training objective.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Weights and noise parameters of the linear variant.
#[derive(Debug, Clone)]
pub struct LinearScmParams {
    /// `(tau+1, D, D)` edge weights, entry `[k][j][d]` scaling `j -> d` at lag `k`.
    pub weights: Tensor,
    /// `(D,)` per-node noise log-variances.
    pub noise_logvar: Tensor,
}

/// Tape handles to the lifted parameters.
#[derive(Clone, Copy)]
pub struct LinearScmVars {
    pub weights: Var,
    pub noise_logvar: Var,
}

impl LinearScmParams {
    pub fn zeros(d: usize, tau: usize) -> Self {
        Self { weights: Tensor::zeros(&[tau + 1, d, d]), noise_logvar: Tensor::zeros(&[d]) }
    }

    pub fn num_nodes(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn tau(&self) -> usize {
        self.weights.shape()[0] - 1
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        f(&mut self.weights);
        f(&mut self.noise_logvar);
    }

    pub fn lift(&self, tape: &Tape, trainable: bool) -> LinearScmVars {
        let mk = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        LinearScmVars { weights: mk(&self.weights), noise_logvar: mk(&self.noise_logvar) }
    }
}

fn check_history(history: &Tensor, g: &Tensor) -> Result<(usize, usize)> {
    let hs = history.shape();
    let gs = g.shape();
    if gs.len() != 3 || gs[1] != gs[2] {
        return Err(Error::shape("linear mean", format!("graph shape {gs:?}")));
    }
    if hs.len() != 2 || hs[0] != gs[0] || hs[1] != gs[1] {
        return Err(Error::shape(
            "linear mean",
            format!("history shape {hs:?} against graph {gs:?}"),
        ));
    }
    Ok((gs[0] - 1, gs[1]))
}

/// Mean of each node at one time step. `history[k][j]` holds the value of
/// node `j` at lag `k` (row 0 is the current step, used by instantaneous
/// edges). Computes `f_d = sum_k sum_j (G o W)[k][j][d] * history[k][j]`.
pub fn linear_mean(history: &Tensor, g: &Tensor, w: &Tensor) -> Result<Vec<f64>> {
    let (tau, d) = check_history(history, g)?;
    if w.shape() != g.shape() {
        return Err(Error::shape("linear mean", format!("weights {:?} vs graph {:?}", w.shape(), g.shape())));
    }
    let mut out = vec![0.0; d];
    for k in 0..=tau {
        for j in 0..d {
            let z = history.at(&[k, j]);
            for dd in 0..d {
                out[dd] += g.at(&[k, j, dd]) * w.at(&[k, j, dd]) * z;
            }
        }
    }
    Ok(out)
}

/// Gaussian log-density summed over nodes for one time step's residuals.
fn gauss_loglik(resid: &[f64], logvar: &Tensor) -> f64 {
    resid
        .iter()
        .enumerate()
        .map(|(d, &r)| {
            let lv = logvar.data()[d];
            -0.5 * (LN_2PI + lv + r * r * (-lv).exp())
        })
        .sum()
}

/// Plain latent log-likelihood of a single series `z` of shape `(T, D)`
/// under hard graph `g`, summing Gaussian residual densities over
/// `t in [tau, T)`.
pub fn latent_loglik_linear(z: &Tensor, g: &Tensor, params: &LinearScmParams) -> Result<f64> {
    let zs = z.shape();
    if zs.len() != 2 {
        return Err(Error::shape("latent loglik", format!("series shape {zs:?}")));
    }
    let (t_len, d) = (zs[0], zs[1]);
    let tau = g.shape()[0] - 1;
    if t_len < tau + 1 {
        return Err(Error::domain("latent loglik", format!("series length {t_len} <= tau {tau}")));
    }
    let mut total = 0.0;
    let mut history = Tensor::zeros(&[tau + 1, d]);
    for t in tau..t_len {
        for k in 0..=tau {
            for j in 0..d {
                history.set(&[k, j], z.at(&[t - k, j]));
            }
        }
        let mean = linear_mean(&history, g, &params.weights)?;
        let resid: Vec<f64> = (0..d).map(|j| z.at(&[t, j]) - mean[j]).collect();
        total += gauss_loglik(&resid, &params.noise_logvar);
    }
    Ok(total)
}

/// Residuals `z_t - mean_t` for all `t in [tau, T)` as a `(B*(T-tau), D)`
/// tape value. `z` is `(B, T, D)`, `g` and `w` are `(tau+1, D, D)`.
pub fn linear_residuals_on_tape(tape: &Tape, z: Var, g: Var, w: Var) -> Result<Var> {
    let zs = tape.shape_of(z);
    let gs = tape.shape_of(g);
    if zs.len() != 3 || gs.len() != 3 {
        return Err(Error::shape("linear residuals", format!("z {zs:?}, g {gs:?}")));
    }
    let (b, t_len, d) = (zs[0], zs[1], zs[2]);
    let tau = gs[0] - 1;
    if t_len <= tau {
        return Err(Error::domain("linear residuals", format!("series length {t_len} <= tau {tau}")));
    }
    let rows = b * (t_len - tau);
    let m = tape.mul(g, w)?;
    let mut mean: Option<Var> = None;
    for k in 0..=tau {
        let mk = tape.reshape(tape.slice(m, 0, k, k + 1)?, &[d, d])?;
        let zk = tape.reshape(tape.slice(z, 1, tau - k, t_len - k)?, &[rows, d])?;
        let part = tape.matmul(zk, mk)?;
        mean = Some(match mean {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    let target = tape.reshape(tape.slice(z, 1, tau, t_len)?, &[rows, d])?;
    tape.sub(target, mean.expect("tau+1 >= 1"))
}

/// Batched latent log-likelihood on the tape: Gaussian residual densities
/// summed over the batch, `t in [tau, T)`, and nodes.
pub fn latent_loglik_linear_on_tape(
    tape: &Tape,
    z: Var,
    g: Var,
    scm: &LinearScmVars,
) -> Result<Var> {
    let resid = linear_residuals_on_tape(tape, z, g, scm.weights)?;
    let rows = tape.shape_of(resid)[0];
    let d = tape.shape_of(resid)[1];
    let lv = scm.noise_logvar;
    let prec = tape.exp(tape.neg(lv));
    let quad = tape.mul(tape.square(resid), prec)?;
    // lv broadcasts over rows; its sum contributes rows * sum(lv).
    let quad_sum = tape.sum_all(quad);
    let lv_sum = tape.scale(tape.sum_all(lv), rows as f64);
    let const_term = -0.5 * LN_2PI * (rows * d) as f64;
    let sum = tape.add(quad_sum, lv_sum)?;
    Ok(tape.add_scalar(tape.scale(sum, -0.5), const_term))
}
