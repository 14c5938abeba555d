//! Nonlinear structural equations with history-conditioned spline noise.
//!
//! The conditional mean of node `d` aggregates messages from its active
//! parents: each parent value is embedded together with the parent's lag
//! embedding and the child's embedding, passed through a shared message
//! net, summed with adjacency weights, and read out by a shared scalar
//! head. Nodes are distinguished only by their embeddings. The residual is
//! modeled by a rational-quadratic spline flow whose parameters come from a
//! second hypernetwork pair conditioned on lagged parents only, so the
//! noise distribution may depend on history but never on the instantaneous
//! parents.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use rand::Rng;

use super::linear::LN_2PI;
use super::spline::{
    spline_inverse_on_tape, split_spline_rows, SplineParams, SplineVarsRows, SPLINE_BOUND,
    SPLINE_RAW_PARAMS,
};

/// Running residual statistics used to standardize inputs to the noise
/// flow, so the spline's bounded support covers the residual bulk. Updated
/// outside the tape; enters the likelihood as constants plus a `-ln std`
/// Jacobian term per entry.
#[derive(Debug, Clone)]
pub struct NoiseStats {
    /// `(D,)` residual means.
    pub mean: Tensor,
    /// `(D,)` residual standard deviations, bounded away from zero.
    pub std: Tensor,
}

impl NoiseStats {
    pub fn identity(d: usize) -> Self {
        Self { mean: Tensor::zeros(&[d]), std: Tensor::full(&[d], 1.0) }
    }

    /// Exponential moving average update from a detached residual batch of
    /// shape `(rows, D)`.
    pub fn update(&mut self, resid: &Tensor, momentum: f64) -> Result<()> {
        let shape = resid.shape();
        let d = self.mean.numel();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::shape("noise stats", format!("residuals {shape:?} for D={d}")));
        }
        let rows = shape[0];
        if rows == 0 {
            return Ok(());
        }
        for j in 0..d {
            let mut m = 0.0;
            for r in 0..rows {
                m += resid.data()[r * d + j];
            }
            m /= rows as f64;
            let mut v = 0.0;
            for r in 0..rows {
                let x = resid.data()[r * d + j] - m;
                v += x * x;
            }
            v /= rows as f64;
            let s = (v + 1e-8).sqrt().max(1e-4);
            self.mean.data_mut()[j] = (1.0 - momentum) * self.mean.data()[j] + momentum * m;
            self.std.data_mut()[j] = (1.0 - momentum) * self.std.data()[j] + momentum * s;
        }
        Ok(())
    }
}

/// Parameters of the nonlinear variant: per-(lag, node) embeddings plus two
/// shared message/readout network pairs, one for the conditional mean and
/// one for the spline noise hypernetwork.
#[derive(Debug, Clone)]
pub struct NonlinearScmParams {
    /// `(tau+1, D, e)` embeddings feeding the mean nets.
    pub embed_mean: Tensor,
    /// `(tau+1, D, e)` embeddings feeding the noise hypernets.
    pub embed_noise: Tensor,
    /// Message net: `[parent value, parent embedding, child embedding] -> e`.
    pub mean_msg: Mlp,
    /// Readout: aggregated message `e -> 1`.
    pub mean_readout: Mlp,
    pub noise_msg: Mlp,
    /// Readout emitting raw spline parameters: `e -> 3 * bins - 1`.
    pub noise_readout: Mlp,
    pub spline_bound: f64,
}

impl NonlinearScmParams {
    pub fn with_width<R: Rng>(d: usize, tau: usize, embed: usize, width: usize, rng: &mut R) -> Self {
        let msg_in = 1 + 2 * embed;
        Self {
            embed_mean: Tensor::randn_scaled(&[tau + 1, d, embed], 1.0 / (embed as f64).sqrt(), rng),
            embed_noise: Tensor::randn_scaled(&[tau + 1, d, embed], 1.0 / (embed as f64).sqrt(), rng),
            mean_msg: Mlp::new(&[msg_in, width, width, embed], true, true, rng),
            mean_readout: Mlp::new(&[embed, width, width, 1], true, true, rng),
            noise_msg: Mlp::new(&[msg_in, width, width, embed], true, true, rng),
            noise_readout: Mlp::new(&[embed, width, width, SPLINE_RAW_PARAMS], true, true, rng),
            spline_bound: SPLINE_BOUND,
        }
    }

    pub fn new<R: Rng>(d: usize, tau: usize, embed: usize, rng: &mut R) -> Self {
        Self::with_width(d, tau, embed, 64, rng)
    }

    pub fn num_nodes(&self) -> usize {
        self.embed_mean.shape()[1]
    }

    pub fn tau(&self) -> usize {
        self.embed_mean.shape()[0] - 1
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_mean.shape()[2]
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        f(&mut self.embed_mean);
        f(&mut self.embed_noise);
        self.mean_msg.for_each_param(f);
        self.mean_readout.for_each_param(f);
        self.noise_msg.for_each_param(f);
        self.noise_readout.for_each_param(f);
    }

    pub fn collect_params(&mut self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.for_each_param(&mut |t| out.push(t.clone()));
        out
    }

    pub fn lift(&self, tape: &Tape, trainable: bool) -> NonlinearScmVars {
        let reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        NonlinearScmVars {
            embed_mean: reg(&self.embed_mean),
            embed_noise: reg(&self.embed_noise),
            mean_msg: self.mean_msg.lift(tape, trainable),
            mean_readout: self.mean_readout.lift(tape, trainable),
            noise_msg: self.noise_msg.lift(tape, trainable),
            noise_readout: self.noise_readout.lift(tape, trainable),
            spline_bound: self.spline_bound,
        }
    }

    /// Rebuilds tape handles from externally registered vars laid out in
    /// `for_each_param` order.
    pub fn vars_from_slice(&self, vars: &[Var]) -> NonlinearScmVars {
        let mut cursor = 2;
        let mean_msg = self.mean_msg.vars_from_slice(vars, &mut cursor);
        let mean_readout = self.mean_readout.vars_from_slice(vars, &mut cursor);
        let noise_msg = self.noise_msg.vars_from_slice(vars, &mut cursor);
        let noise_readout = self.noise_readout.vars_from_slice(vars, &mut cursor);
        NonlinearScmVars {
            embed_mean: vars[0],
            embed_noise: vars[1],
            mean_msg,
            mean_readout,
            noise_msg,
            noise_readout,
            spline_bound: self.spline_bound,
        }
    }
}

pub struct NonlinearScmVars {
    pub embed_mean: Var,
    pub embed_noise: Var,
    pub mean_msg: crate::nn::MlpVars,
    pub mean_readout: crate::nn::MlpVars,
    pub noise_msg: crate::nn::MlpVars,
    pub noise_readout: crate::nn::MlpVars,
    pub spline_bound: f64,
}

fn embed_row(embed: &Tensor, k: usize, j: usize) -> Vec<f64> {
    let e = embed.shape()[2];
    let d = embed.shape()[1];
    let base = (k * d + j) * e;
    embed.data()[base..base + e].to_vec()
}

/// Aggregated hypernetwork input for child `d` at one time step, evaluated
/// without the tape. `history[k][j]` is node `j` at lag `k`; lags in
/// `k_range` contribute.
fn aggregate_plain(
    history: &Tensor,
    g: &Tensor,
    embed: &Tensor,
    msg_net: &Mlp,
    child: usize,
    k_range: std::ops::RangeInclusive<usize>,
) -> Result<Tensor> {
    let e = embed.shape()[2];
    let d = embed.shape()[1];
    let mut agg = Tensor::zeros(&[1, e]);
    let child_emb = embed_row(embed, 0, child);
    for k in k_range {
        for j in 0..d {
            let gv = g.at(&[k, j, child]);
            if gv == 0.0 {
                continue;
            }
            let mut input = Vec::with_capacity(1 + 2 * e);
            input.push(history.at(&[k, j]));
            input.extend(embed_row(embed, k, j));
            input.extend(child_emb.iter());
            let row = Tensor::from_vec(vec![1, 1 + 2 * e], input)?;
            let msg = msg_net.apply_plain(&row)?;
            for i in 0..e {
                agg.data_mut()[i] += gv * msg.data()[i];
            }
        }
    }
    Ok(agg)
}

/// Conditional mean of every node at one time step. `history[k][j]` holds
/// node `j` at lag `k` (row 0 is the current step); `g` is `(tau+1, D, D)`
/// with entries in `[0, 1]`.
pub fn nonlinear_mean(history: &Tensor, g: &Tensor, params: &NonlinearScmParams) -> Result<Vec<f64>> {
    let gs = g.shape();
    let hs = history.shape();
    if gs.len() != 3 || hs.len() != 2 || hs[0] != gs[0] || hs[1] != gs[1] || gs[1] != gs[2] {
        return Err(Error::shape("nonlinear mean", format!("history {hs:?}, graph {gs:?}")));
    }
    let tau = gs[0] - 1;
    let d = gs[1];
    let mut out = Vec::with_capacity(d);
    for child in 0..d {
        let agg = aggregate_plain(history, g, &params.embed_mean, &params.mean_msg, child, 0..=tau)?;
        let y = params.mean_readout.apply_plain(&agg)?;
        out.push(y.data()[0]);
    }
    Ok(out)
}

/// Raw spline parameters for the noise of node `d` at one time step,
/// conditioned on lagged parents only.
pub fn noise_spline_raw(history: &Tensor, g: &Tensor, params: &NonlinearScmParams, child: usize) -> Result<Vec<f64>> {
    let tau = g.shape()[0] - 1;
    let agg = if tau >= 1 {
        aggregate_plain(history, g, &params.embed_noise, &params.noise_msg, child, 1..=tau)?
    } else {
        Tensor::zeros(&[1, params.embed_dim()])
    };
    let raw = params.noise_readout.apply_plain(&agg)?;
    Ok(raw.data().to_vec())
}

/// Plain latent log-likelihood of one series `z` of shape `(T, D)`: the
/// residual is standardized, inverted through the conditional spline, and
/// scored under a standard normal base with the accumulated log-dets.
pub fn latent_loglik_nonlinear(
    z: &Tensor,
    g: &Tensor,
    params: &NonlinearScmParams,
    stats: &NoiseStats,
) -> Result<f64> {
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
        let mean = nonlinear_mean(&history, g, params)?;
        for child in 0..d {
            let u = z.at(&[t, child]) - mean[child];
            let s = stats.std.data()[child];
            let u_std = (u - stats.mean.data()[child]) / s;
            let raw = noise_spline_raw(&history, g, params, child)?;
            let sp = SplineParams::from_flat(&raw, params.spline_bound)?;
            let (x, ld) = sp.inverse(u_std);
            total += -0.5 * (LN_2PI + x * x) - ld - s.ln();
        }
    }
    Ok(total)
}

struct LagCache {
    /// Per lag: parent values as a `(rows*D, 1)` column.
    z_cols: Vec<Var>,
    /// Per lag and embedding table: parent embeddings tiled to `(rows*D, e)`.
    mean_par: Vec<Var>,
    noise_par: Vec<Var>,
}

fn tile_embed(tape: &Tape, embed: Var, k: usize, rows: usize, d: usize, e: usize) -> Result<Var> {
    let ek = tape.reshape(tape.slice(embed, 0, k, k + 1)?, &[d, e])?;
    tape.reshape(tape.broadcast_to(ek, &[rows, d, e])?, &[rows * d, e])
}

fn child_embed(tape: &Tape, embed: Var, child: usize, rows: usize, d: usize, e: usize) -> Result<Var> {
    let e0 = tape.reshape(tape.slice(tape.slice(embed, 0, 0, 1)?, 1, child, child + 1)?, &[1, e])?;
    let _ = d;
    tape.broadcast_to(e0, &[rows, e])
}

fn graph_column(tape: &Tape, g: Var, k: usize, child: usize, d: usize) -> Result<Var> {
    tape.reshape(tape.slice(tape.slice(g, 0, k, k + 1)?, 2, child, child + 1)?, &[d, 1])
}

/// Batched latent log-likelihood on the tape. `z` is `(B, T, D)`, `g` is a
/// `(tau+1, D, D)` adjacency value (hard or relaxed) on the tape.
pub fn latent_loglik_nonlinear_on_tape(
    tape: &Tape,
    z: Var,
    g: Var,
    scm: &NonlinearScmVars,
    stats: &NoiseStats,
) -> Result<Var> {
    Ok(latent_loglik_nonlinear_terms_on_tape(tape, z, g, scm, stats)?.0)
}

/// Like `latent_loglik_nonlinear_on_tape` but also returns the raw
/// residuals `(B*(T-tau), D)` so a trainer can refresh running noise
/// statistics from their detached values.
pub fn latent_loglik_nonlinear_terms_on_tape(
    tape: &Tape,
    z: Var,
    g: Var,
    scm: &NonlinearScmVars,
    stats: &NoiseStats,
) -> Result<(Var, Var)> {
    let zs = tape.shape_of(z);
    let gs = tape.shape_of(g);
    if zs.len() != 3 || gs.len() != 3 {
        return Err(Error::shape("latent loglik", format!("z {zs:?}, g {gs:?}")));
    }
    let (b, t_len, d) = (zs[0], zs[1], zs[2]);
    let tau = gs[0] - 1;
    if t_len <= tau {
        return Err(Error::domain("latent loglik", format!("series length {t_len} <= tau {tau}")));
    }
    let e = tape.shape_of(scm.embed_mean)[2];
    let rows = b * (t_len - tau);

    let mut cache = LagCache { z_cols: Vec::new(), mean_par: Vec::new(), noise_par: Vec::new() };
    for k in 0..=tau {
        let zk = tape.reshape(tape.slice(z, 1, tau - k, t_len - k)?, &[rows * d, 1])?;
        cache.z_cols.push(zk);
        cache.mean_par.push(tile_embed(tape, scm.embed_mean, k, rows, d, e)?);
        cache.noise_par.push(tile_embed(tape, scm.embed_noise, k, rows, d, e)?);
    }
    let target = tape.reshape(tape.slice(z, 1, tau, t_len)?, &[rows, d])?;

    let aggregate = |par: &[Var],
                     embed: Var,
                     msg_net: &crate::nn::MlpVars,
                     child: usize,
                     from_lag: usize|
     -> Result<Var> {
        let cemb = child_embed(tape, embed, child, rows * d, d, e)?;
        let mut acc: Option<Var> = None;
        for k in from_lag..=tau {
            let input = tape.concat(&[cache.z_cols[k], par[k], cemb], 1)?;
            let msg = msg_net.apply(tape, input)?;
            let msg3 = tape.reshape(msg, &[rows, d, e])?;
            let col = graph_column(tape, g, k, child, d)?;
            let weighted = tape.mul(msg3, col)?;
            let summed = tape.reshape(tape.sum_axes(weighted, &[1], false)?, &[rows, e])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, summed)?,
                None => summed,
            });
        }
        Ok(acc.expect("at least one lag"))
    };

    let mut total: Option<Var> = None;
    let mut resid_cols = Vec::with_capacity(d);
    for child in 0..d {
        let agg = aggregate(&cache.mean_par, scm.embed_mean, &scm.mean_msg, child, 0)?;
        let mean_col = scm.mean_readout.apply(tape, agg)?;
        let target_col = tape.slice(target, 1, child, child + 1)?;
        let u_col = tape.sub(target_col, mean_col)?;
        resid_cols.push(u_col);
        let u = tape.reshape(u_col, &[rows])?;

        let m = stats.mean.data()[child];
        let s = stats.std.data()[child];
        let u_std = tape.scale(tape.add_scalar(u, -m), 1.0 / s);

        let raw = if tau >= 1 {
            let agg_n = aggregate(&cache.noise_par, scm.embed_noise, &scm.noise_msg, child, 1)?;
            scm.noise_readout.apply(tape, agg_n)?
        } else {
            let zeros = tape.constant(Tensor::zeros(&[rows, e]));
            scm.noise_readout.apply(tape, zeros)?
        };
        let rows_vars: SplineVarsRows = split_spline_rows(tape, raw)?;
        let (x, ld) = spline_inverse_on_tape(tape, u_std, &rows_vars, scm.spline_bound)?;

        let base = tape.scale(tape.sum_all(tape.square(x)), -0.5);
        let ld_sum = tape.neg(tape.sum_all(ld));
        let consts = -(rows as f64) * (0.5 * LN_2PI + s.ln());
        let ll = tape.add_scalar(tape.add(base, ld_sum)?, consts);
        total = Some(match total {
            Some(t) => tape.add(t, ll)?,
            None => ll,
        });
    }
    let resid = if resid_cols.len() == 1 { resid_cols[0] } else { tape.concat(&resid_cols, 1)? };
    Ok((total.expect("D >= 1"), resid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn small_params(d: usize, tau: usize, seed: u64) -> NonlinearScmParams {
        let mut rng = StdRng::seed_from_u64(seed);
        NonlinearScmParams::with_width(d, tau, 3, 8, &mut rng)
    }

    #[test]
    fn empty_graph_mean_is_constant_across_nodes() {
        let params = small_params(3, 1, 5);
        let g = Tensor::zeros(&[2, 3, 3]);
        let h1 = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let h2 = Tensor::from_vec(vec![2, 3], vec![9.0, 9.0, 9.0, -9.0, 0.0, 4.0]).unwrap();
        let m1 = nonlinear_mean(&h1, &g, &params).unwrap();
        let m2 = nonlinear_mean(&h2, &g, &params).unwrap();
        for v in &m1 {
            assert!(v.is_finite());
        }
        // No parents: the readout sees the zero aggregate regardless of input
        // values, and shared nets make every node identical.
        assert_eq!(m1, m2);
        assert_relative_eq!(m1[0], m1[1]);
        assert_relative_eq!(m1[1], m1[2]);
    }

    #[test]
    fn node_permutation_equivariance() {
        let d = 3;
        let tau = 1;
        let mut params = small_params(d, tau, 7);
        let mut rng = StdRng::seed_from_u64(8);
        let history = Tensor::randn(&[tau + 1, d], &mut rng);
        let mut g = Tensor::zeros(&[tau + 1, d, d]);
        g.set(&[0, 0, 1], 1.0);
        g.set(&[1, 2, 0], 1.0);
        g.set(&[1, 1, 1], 1.0);
        let base = nonlinear_mean(&history, &g, &params).unwrap();

        // Swap nodes 0 and 2 everywhere: history columns, graph rows/cols per
        // lag, and embedding rows per lag.
        let perm = [2usize, 1, 0];
        let mut h2 = history.clone();
        let mut g2 = Tensor::zeros(&[tau + 1, d, d]);
        for k in 0..=tau {
            for j in 0..d {
                h2.set(&[k, perm[j]], history.at(&[k, j]));
                for dd in 0..d {
                    if g.at(&[k, j, dd]) != 0.0 {
                        g2.set(&[k, perm[j], perm[dd]], 1.0);
                    }
                }
            }
        }
        let e = params.embed_dim();
        for table in [&mut params.embed_mean, &mut params.embed_noise] {
            let orig = table.clone();
            for k in 0..=tau {
                for j in 0..d {
                    for i in 0..e {
                        table.set(&[k, perm[j], i], orig.at(&[k, j, i]));
                    }
                }
            }
        }
        let swapped = nonlinear_mean(&h2, &g2, &params).unwrap();
        for j in 0..d {
            assert_relative_eq!(swapped[perm[j]], base[j], max_relative = 1e-12);
        }
    }

    #[test]
    fn identity_spline_reduces_to_standard_normal() {
        // Force the noise readout to emit identity-spline parameters by
        // zeroing its net and setting the bias to the identity raw values.
        let d = 2;
        let tau = 1;
        let mut params = small_params(d, tau, 11);
        let ident = SplineParams::identity(params.spline_bound);
        let mut bias = ident.widths_raw.clone();
        bias.extend_from_slice(&ident.heights_raw);
        bias.extend_from_slice(&ident.derivs_raw);
        let last = params.noise_readout.layers.last_mut().unwrap();
        last.w = Tensor::zeros(last.w.shape());
        last.b = Tensor::from_vec(vec![SPLINE_RAW_PARAMS], bias).unwrap();

        let mut rng = StdRng::seed_from_u64(12);
        let z = Tensor::randn(&[4, d], &mut rng);
        let g = Tensor::zeros(&[tau + 1, d, d]);
        let stats = NoiseStats::identity(d);
        let got = latent_loglik_nonlinear(&z, &g, &params, &stats).unwrap();

        // With no parents the mean is a constant c = readout(0); the density
        // of each entry is the standard normal at z - c.
        let history = Tensor::zeros(&[tau + 1, d]);
        let c = nonlinear_mean(&history, &g, &params).unwrap();
        let mut want = 0.0;
        for t in tau..4 {
            for j in 0..d {
                let u = z.at(&[t, j]) - c[j];
                want += -0.5 * (LN_2PI + u * u);
            }
        }
        assert_relative_eq!(got, want, max_relative = 1e-9, epsilon = 1e-9);
    }

    #[test]
    fn tape_loglik_matches_plain() {
        let d = 3;
        let tau = 2;
        let params = small_params(d, tau, 21);
        let mut rng = StdRng::seed_from_u64(22);
        let (b, t_len) = (2, 6);
        let z = Tensor::randn(&[b, t_len, d], &mut rng);
        let mut g = Tensor::zeros(&[tau + 1, d, d]);
        g.set(&[0, 0, 1], 1.0);
        g.set(&[0, 1, 2], 1.0);
        g.set(&[1, 2, 0], 1.0);
        g.set(&[2, 1, 1], 1.0);
        let mut stats = NoiseStats::identity(d);
        stats.mean = Tensor::from_vec(vec![d], vec![0.1, -0.2, 0.05]).unwrap();
        stats.std = Tensor::from_vec(vec![d], vec![1.5, 0.7, 1.0]).unwrap();

        let mut want = 0.0;
        for n in 0..b {
            let mut zn = Tensor::zeros(&[t_len, d]);
            for t in 0..t_len {
                for j in 0..d {
                    zn.set(&[t, j], z.at(&[n, t, j]));
                }
            }
            want += latent_loglik_nonlinear(&zn, &g, &params, &stats).unwrap();
        }

        let tape = Tape::new();
        let zv = tape.constant(z);
        let gv = tape.constant(g);
        let vars = params.lift(&tape, false);
        let ll = latent_loglik_nonlinear_on_tape(&tape, zv, gv, &vars, &stats).unwrap();
        assert_relative_eq!(tape.value_scalar(ll), want, max_relative = 1e-9);
    }

    #[test]
    fn loglik_gradients_match_fd_all_params() {
        // D=2, T=5 instance; all embeddings and net parameters checked.
        // Every node keeps a lagged parent: a node without one feeds the
        // zero aggregate through freshly zero-initialized biases, parking
        // the hidden units exactly on the leaky-relu kink where central
        // differences and the subgradient legitimately disagree.
        let d = 2;
        let tau = 1;
        let mut params = small_params(d, tau, 31);
        let mut rng = StdRng::seed_from_u64(32);
        let z = Tensor::randn(&[1, 5, d], &mut rng);
        let mut g = Tensor::zeros(&[tau + 1, d, d]);
        g.set(&[0, 0, 1], 1.0);
        g.set(&[1, 0, 0], 1.0);
        g.set(&[1, 1, 0], 1.0);
        g.set(&[1, 0, 1], 1.0);
        let stats = NoiseStats::identity(d);
        let tensors = params.collect_params();
        let report = grad_check(
            |tape, vars| {
                let sv = params.vars_from_slice(vars);
                let zv = tape.constant(z.clone());
                let gv = tape.constant(g.clone());
                latent_loglik_nonlinear_on_tape(tape, zv, gv, &sv, &stats)
            },
            &tensors,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {} at {:?}", report.max_rel_err, report.worst);
    }
}
