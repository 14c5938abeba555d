//! Variational posteriors: the Bernoulli graph posterior with relaxed
//! sampling, Gaussian posteriors over kernel centers and scales, and the
//! amortized per-timestep encoder for the latent series.
//!
//! Every sampler takes its noise explicitly (with an rng convenience
//! wrapper) so objectives stay deterministic under finite-difference
//! checking and reruns.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::spatial::{differentiable_factor, FactorLayout, GridSpec, KernelFamily};
use rand::Rng;

/// Relaxation temperature for binary graph samples.
pub const GUMBEL_TEMPERATURE: f64 = 0.5;

const LN_2PI_E: f64 = 2.8378770664093453;

/// Independent-Bernoulli posterior over temporal adjacencies, parameterized
/// by logits of shape `(tau+1, D, D)`.
#[derive(Debug, Clone)]
pub struct GraphPosterior {
    pub logits: Tensor,
    pub temperature: f64,
}

impl GraphPosterior {
    pub fn new(d: usize, tau: usize, initial_logit: f64) -> Self {
        Self { logits: Tensor::full(&[tau + 1, d, d], initial_logit), temperature: GUMBEL_TEMPERATURE }
    }

    pub fn tau(&self) -> usize {
        self.logits.shape()[0] - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Edge probabilities `sigmoid(logits)`, zeroed on the instantaneous
    /// diagonal the posterior puts no mass on.
    pub fn edge_probs(&self) -> Tensor {
        let mut p = self.logits.map(crate::autodiff::sigmoid_stable);
        let d = self.num_nodes();
        for i in 0..d {
            p.set(&[0, i, i], 0.0);
        }
        p
    }
}

/// Support mask of the posterior: ones everywhere except the instantaneous
/// diagonal. An acyclic slice cannot carry a self-edge, so `q(G)` fixes
/// those entries to zero instead of learning them; left free, the
/// likelihood rewards the degenerate solution of each node explaining
/// itself within the timestep.
pub fn feasible_edge_mask(tau: usize, d: usize) -> Tensor {
    let mut m = Tensor::full(&[tau + 1, d, d], 1.0);
    for i in 0..d {
        m.set(&[0, i, i], 0.0);
    }
    m
}

/// Draws logistic noise, one value per edge, for a relaxed Bernoulli sample.
pub fn logistic_noise<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
        *v = (u / (1.0 - u)).ln();
    }
    t
}

/// Relaxed Bernoulli sample of the adjacency on the tape:
/// `sigmoid((logits + noise) / temperature)` with pre-drawn logistic noise.
/// With `hard`, the forward value is thresholded to exact {0,1} while the
/// gradient keeps flowing through the relaxed sample (straight-through).
pub fn sample_graph_with_noise(
    tape: &Tape,
    logits: Var,
    temperature: f64,
    noise: &Tensor,
    hard: bool,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::domain("sample graph", "temperature must be positive"));
    }
    if noise.shape() != tape.shape_of(logits).as_slice() {
        return Err(Error::shape(
            "sample graph",
            format!("noise {:?} vs logits {:?}", noise.shape(), tape.shape_of(logits)),
        ));
    }
    let shape = noise.shape();
    let mask = tape.constant(feasible_edge_mask(shape[0] - 1, shape[1]));
    let shifted = tape.add(logits, tape.constant(noise.clone()))?;
    let soft = tape.mul(tape.sigmoid(tape.scale(shifted, 1.0 / temperature)), mask)?;
    if !hard {
        return Ok(soft);
    }
    let soft_vals = tape.value(soft);
    let jump = soft_vals.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
    let correction = {
        let mut c = jump.clone();
        for (ci, si) in c.data_mut().iter_mut().zip(soft_vals.data()) {
            *ci -= si;
        }
        c
    };
    tape.add(soft, tape.constant(correction))
}

pub fn sample_graph<R: Rng>(
    tape: &Tape,
    q: &GraphPosterior,
    logits: Var,
    rng: &mut R,
    hard: bool,
) -> Result<Var> {
    let noise = logistic_noise(q.logits.shape(), rng);
    sample_graph_with_noise(tape, logits, q.temperature, &noise, hard)
}

/// Closed-form entropy of the Bernoulli posterior, summed over the support:
/// sum_e p*softplus(-w) + (1-p)*softplus(w), skipping the instantaneous
/// diagonal whose entries are fixed at zero.
pub fn graph_entropy_on_tape(tape: &Tape, logits: Var) -> Result<Var> {
    let shape = tape.shape_of(logits);
    let mask = tape.constant(feasible_edge_mask(shape[0] - 1, shape[1]));
    let p = tape.sigmoid(logits);
    let one_minus = tape.add_scalar(tape.neg(p), 1.0);
    let a = tape.mul(p, tape.softplus(tape.neg(logits)))?;
    let b = tape.mul(one_minus, tape.softplus(logits))?;
    Ok(tape.sum_all(tape.mul(tape.add(a, b)?, mask)?))
}

pub fn graph_entropy(logits: &Tensor) -> f64 {
    let mask = feasible_edge_mask(logits.shape()[0] - 1, logits.shape()[1]);
    logits
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&w, &m)| {
            let p = crate::autodiff::sigmoid_stable(w);
            m * (p * crate::autodiff::softplus_stable(-w)
                + (1.0 - p) * crate::autodiff::softplus_stable(w))
        })
        .sum()
}

/// Gaussian posterior over kernel parameters for one variate's nodes:
/// centers get a mean in logit space plus a shared per-node log-variance,
/// scales get scalar mean/log-variance pairs.
#[derive(Debug, Clone)]
pub struct FactorPosterior {
    /// `(D, 2)` center means in logit space (samples are sigmoid-squashed).
    pub mu_rho: Tensor,
    /// `(D,)` center log-variances shared across the two coordinates.
    pub v_rho: Tensor,
    /// `(D,)` log-scale means.
    pub mu_gamma: Tensor,
    /// `(D,)` log-scale log-variances.
    pub v_gamma: Tensor,
}

#[derive(Clone, Copy)]
pub struct FactorPosteriorVars {
    pub mu_rho: Var,
    pub v_rho: Var,
    pub mu_gamma: Var,
    pub v_gamma: Var,
}

impl FactorPosterior {
    /// Posterior centered on the given unit-square positions (stored in
    /// logit space) with small initial variances.
    pub fn from_unit_centers(centers_unit: &Tensor, mu_gamma: f64) -> Result<Self> {
        let s = centers_unit.shape();
        if s.len() != 2 || s[1] != 2 {
            return Err(Error::shape("factor posterior", format!("centers {s:?}")));
        }
        for &c in centers_unit.data() {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::domain("factor posterior", format!("unit center {c} outside (0,1)")));
            }
        }
        let d = s[0];
        Ok(Self {
            mu_rho: centers_unit.map(|c| (c / (1.0 - c)).ln()),
            v_rho: Tensor::full(&[d], -4.0),
            mu_gamma: Tensor::full(&[d], mu_gamma),
            v_gamma: Tensor::full(&[d], -4.0),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.mu_rho.shape()[0]
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        f(&mut self.mu_rho);
        f(&mut self.v_rho);
        f(&mut self.mu_gamma);
        f(&mut self.v_gamma);
    }

    pub fn lift(&self, tape: &Tape, trainable: bool) -> FactorPosteriorVars {
        let reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        FactorPosteriorVars {
            mu_rho: reg(&self.mu_rho),
            v_rho: reg(&self.v_rho),
            mu_gamma: reg(&self.mu_gamma),
            v_gamma: reg(&self.v_gamma),
        }
    }
}

/// A reparameterized draw of the spatial factor and the kernel parameters
/// behind it.
pub struct FactorSample {
    /// Factor matrix on the tape, in the requested layout.
    pub factor: Var,
    /// `(D, 2)` sampled centers in grid-domain coordinates.
    pub rho: Var,
    /// `(D,)` sampled log-scales.
    pub gamma: Var,
}

/// Reparameterized factor sample: `rho = sigmoid(mu + exp(v/2) eps)` mapped
/// onto the grid domain, `gamma = mu + exp(v/2) eps`, then the kernel is
/// evaluated differentiably.
#[allow(clippy::too_many_arguments)]
pub fn sample_factors_with_noise(
    tape: &Tape,
    q: &FactorPosteriorVars,
    grid: &GridSpec,
    family: KernelFamily,
    aniso: Option<(Var, Var)>,
    eps_rho: &Tensor,
    eps_gamma: &Tensor,
    layout: FactorLayout,
) -> Result<FactorSample> {
    let d = tape.shape_of(q.mu_rho)[0];
    if eps_rho.shape() != [d, 2] || eps_gamma.shape() != [d] {
        return Err(Error::shape(
            "sample factors",
            format!("noise shapes {:?} / {:?} for D={d}", eps_rho.shape(), eps_gamma.shape()),
        ));
    }
    let std_rho = tape.exp(tape.scale(tape.reshape(q.v_rho, &[d, 1])?, 0.5));
    let raw_rho = tape.add(q.mu_rho, tape.mul(std_rho, tape.constant(eps_rho.clone()))?)?;
    let unit = tape.sigmoid(raw_rho);
    let (scale, offset) = grid.unit_to_domain();
    let sc = tape.constant(Tensor::from_vec(vec![2], scale.to_vec())?);
    let of = tape.constant(Tensor::from_vec(vec![2], offset.to_vec())?);
    let rho = tape.add(tape.mul(unit, sc)?, of)?;

    let std_gamma = tape.exp(tape.scale(q.v_gamma, 0.5));
    let gamma = tape.add(q.mu_gamma, tape.mul(std_gamma, tape.constant(eps_gamma.clone()))?)?;

    let factor = differentiable_factor(tape, grid, family, rho, gamma, aniso, layout)?;
    Ok(FactorSample { factor, rho, gamma })
}

#[allow(clippy::too_many_arguments)]
pub fn sample_factors<R: Rng>(
    tape: &Tape,
    q: &FactorPosteriorVars,
    grid: &GridSpec,
    family: KernelFamily,
    aniso: Option<(Var, Var)>,
    rng: &mut R,
    layout: FactorLayout,
) -> Result<FactorSample> {
    let d = tape.shape_of(q.mu_rho)[0];
    let eps_rho = Tensor::randn(&[d, 2], rng);
    let eps_gamma = Tensor::randn(&[d], rng);
    sample_factors_with_noise(tape, q, grid, family, aniso, &eps_rho, &eps_gamma, layout)
}

/// KL between the factor posterior and its prior, up to the constant from
/// the uniform center prior: the scale part is the closed-form Gaussian KL
/// to N(0,1), the center part contributes the negative entropy of its
/// 2-coordinate Gaussian.
pub fn factor_kl_on_tape(tape: &Tape, q: &FactorPosteriorVars) -> Result<Var> {
    // 1/2 sum(exp(v) + mu^2 - 1 - v) over nodes.
    let ev = tape.exp(q.v_gamma);
    let mu2 = tape.square(q.mu_gamma);
    let inner = tape.sub(tape.add(ev, mu2)?, tape.add_scalar(q.v_gamma, 1.0))?;
    let kl_gamma = tape.scale(tape.sum_all(inner), 0.5);
    // -H(q(rho)): two coordinates share one log-variance.
    let d = tape.shape_of(q.v_rho)[0] as f64;
    let neg_ent = tape.add_scalar(tape.neg(tape.sum_all(q.v_rho)), -d * LN_2PI_E);
    tape.add(kl_gamma, neg_ent)
}

pub fn factor_kl(q: &FactorPosterior) -> f64 {
    let kl_gamma: f64 = q
        .mu_gamma
        .data()
        .iter()
        .zip(q.v_gamma.data())
        .map(|(&m, &v)| 0.5 * (v.exp() + m * m - 1.0 - v))
        .sum();
    let neg_ent: f64 = q.v_rho.data().iter().map(|&v| -(v + LN_2PI_E)).sum();
    kl_gamma + neg_ent
}

/// Per-variate encoder nets: each variate maps a length-L grid snapshot to
/// its nodes' means and log-variances through two separate plain MLPs.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub mu_nets: Vec<Mlp>,
    pub logvar_nets: Vec<Mlp>,
    pub nodes_per_variate: Vec<usize>,
}

pub struct EncoderVars {
    pub mu_nets: Vec<crate::nn::MlpVars>,
    pub logvar_nets: Vec<crate::nn::MlpVars>,
}

impl EncoderParams {
    pub fn new<R: Rng>(
        points_per_variate: &[usize],
        nodes_per_variate: &[usize],
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if points_per_variate.len() != nodes_per_variate.len() || points_per_variate.is_empty() {
            return Err(Error::shape(
                "encoder params",
                format!("{} grids vs {} node counts", points_per_variate.len(), nodes_per_variate.len()),
            ));
        }
        let mut mu_nets = Vec::new();
        let mut logvar_nets = Vec::new();
        for (&l, &dv) in points_per_variate.iter().zip(nodes_per_variate) {
            mu_nets.push(Mlp::new(&[l, width, width, dv], false, false, rng));
            logvar_nets.push(Mlp::new(&[l, width, width, dv], false, false, rng));
        }
        Ok(Self { mu_nets, logvar_nets, nodes_per_variate: nodes_per_variate.to_vec() })
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes_per_variate.iter().sum()
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for net in self.mu_nets.iter_mut().chain(self.logvar_nets.iter_mut()) {
            net.for_each_param(f);
        }
    }

    pub fn lift(&self, tape: &Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            mu_nets: self.mu_nets.iter().map(|n| n.lift(tape, trainable)).collect(),
            logvar_nets: self.logvar_nets.iter().map(|n| n.lift(tape, trainable)).collect(),
        }
    }
}

/// Encoded latents for a batch, kept in both layouts the objective needs.
pub struct EncodedLatents {
    /// `(B, T, D)` reparameterized sample.
    pub z: Var,
    /// `(B*T, D)` view of the same sample for the decoder.
    pub z_rows: Var,
    /// `(B*T, D)` posterior means.
    pub mu: Var,
    /// `(B*T, D)` posterior log-variances.
    pub logvar: Var,
}

/// Runs the per-variate encoders over pre-laid rows. `x_rows[v]` holds one
/// `(B*T, L_v)` tape value whose row `b*T + t` is sample b's variate-v grid
/// snapshot at time t; `noise` is a pre-drawn `(B*T, D)` standard normal.
pub fn encode_latents_rows(
    tape: &Tape,
    x_rows: &[Var],
    enc: &EncoderVars,
    noise: &Tensor,
    b: usize,
    t_len: usize,
) -> Result<EncodedLatents> {
    if x_rows.len() != enc.mu_nets.len() {
        return Err(Error::shape(
            "encode latents",
            format!("{} variates vs {} nets", x_rows.len(), enc.mu_nets.len()),
        ));
    }
    let rows = b * t_len;
    let mut mus = Vec::with_capacity(x_rows.len());
    let mut lvs = Vec::with_capacity(x_rows.len());
    for (v, &x) in x_rows.iter().enumerate() {
        let xs = tape.shape_of(x);
        if xs.len() != 2 || xs[0] != rows {
            return Err(Error::shape("encode latents", format!("variate {v} rows {xs:?}, want ({rows}, L)")));
        }
        mus.push(enc.mu_nets[v].apply(tape, x)?);
        lvs.push(enc.logvar_nets[v].apply(tape, x)?);
    }
    let mu = if mus.len() == 1 { mus[0] } else { tape.concat(&mus, 1)? };
    let logvar = if lvs.len() == 1 { lvs[0] } else { tape.concat(&lvs, 1)? };
    let d = tape.shape_of(mu)[1];
    if noise.shape() != [rows, d] {
        return Err(Error::shape(
            "encode latents",
            format!("noise {:?}, want ({rows}, {d})", noise.shape()),
        ));
    }
    let std = tape.exp(tape.scale(logvar, 0.5));
    let z_rows = tape.add(mu, tape.mul(std, tape.constant(noise.clone()))?)?;
    let z = tape.reshape(z_rows, &[b, t_len, d])?;
    Ok(EncodedLatents { z, z_rows, mu, logvar })
}

/// Plain (tape-free) encoding of one sample's observations `(V, L, T)`,
/// returning the latent sample, means, and log-variances as `(T, D)`.
pub fn encode_latents<R: Rng>(
    x: &Tensor,
    enc: &EncoderParams,
    rng: &mut R,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = x.shape();
    if s.len() != 3 || s[0] != enc.mu_nets.len() {
        return Err(Error::shape("encode latents", format!("observations {s:?}")));
    }
    let (n_var, l, t_len) = (s[0], s[1], s[2]);
    let d = enc.total_nodes();
    let mut mu = Tensor::zeros(&[t_len, d]);
    let mut logvar = Tensor::zeros(&[t_len, d]);
    let mut col0 = 0;
    for v in 0..n_var {
        if enc.mu_nets[v].input_dim() != l {
            return Err(Error::shape(
                "encode latents",
                format!("variate {v} expects L={}, got {l}", enc.mu_nets[v].input_dim()),
            ));
        }
        let mut rows = Tensor::zeros(&[t_len, l]);
        for t in 0..t_len {
            for p in 0..l {
                rows.set(&[t, p], x.at(&[v, p, t]));
            }
        }
        let m = enc.mu_nets[v].apply_plain(&rows)?;
        let lv = enc.logvar_nets[v].apply_plain(&rows)?;
        let dv = enc.nodes_per_variate[v];
        for t in 0..t_len {
            for j in 0..dv {
                mu.set(&[t, col0 + j], m.at(&[t, j]));
                logvar.set(&[t, col0 + j], lv.at(&[t, j]));
            }
        }
        col0 += dv;
    }
    let mut z = mu.clone();
    for (zi, lv) in z.data_mut().iter_mut().zip(logvar.data()) {
        let eps: f64 = rng.sample(rand_distr::StandardNormal);
        *zi += (0.5 * lv).exp() * eps;
    }
    Ok((z, mu, logvar))
}

/// Entropy of a diagonal Gaussian with the given log-variances:
/// `1/2 sum(logvar + ln(2 pi e))`.
pub fn gaussian_entropy_on_tape(tape: &Tape, logvar: Var) -> Var {
    let n: usize = tape.shape_of(logvar).iter().product();
    tape.add_scalar(tape.scale(tape.sum_all(logvar), 0.5), 0.5 * LN_2PI_E * n as f64)
}

pub fn gaussian_entropy(logvar: &Tensor) -> f64 {
    logvar.data().iter().map(|&v| 0.5 * (v + LN_2PI_E)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::LN_2PI;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn graph_entropy_closed_forms() {
        // All logits zero: one bit per supported edge; the three
        // instantaneous self-edges are outside the support.
        let q = GraphPosterior::new(3, 1, 0.0);
        let want = (2.0 * 9.0 - 3.0) * std::f64::consts::LN_2;
        assert_relative_eq!(graph_entropy(&q.logits), want, max_relative = 1e-12);

        // Single lagged edge at p = 0.9 (the masked instantaneous entry
        // contributes nothing regardless of its logit).
        let logit = (0.9f64 / 0.1).ln();
        let one = Tensor::from_vec(vec![2, 1, 1], vec![40.0, logit]).unwrap();
        assert_relative_eq!(graph_entropy(&one), 0.3250829733914482, max_relative = 1e-6);

        // Saturated edges contribute nothing.
        let sat = Tensor::from_vec(vec![3, 1, 1], vec![0.0, 80.0, -80.0]).unwrap();
        assert!(graph_entropy(&sat).abs() < 1e-12);

        // Tape agrees with plain.
        let tape = Tape::new();
        let mut rng = StdRng::seed_from_u64(5);
        let logits = Tensor::randn(&[2, 3, 3], &mut rng);
        let lv = tape.param(logits.clone());
        let h = graph_entropy_on_tape(&tape, lv).unwrap();
        assert_relative_eq!(tape.value_scalar(h), graph_entropy(&logits), max_relative = 1e-12);
    }

    #[test]
    fn graph_entropy_matches_monte_carlo() {
        // H estimated as mean of -ln q(sample) over exact Bernoulli draws
        // of one lagged edge.
        let logit: f64 = 0.73;
        let p = crate::autodiff::sigmoid_stable(logit);
        let t = Tensor::from_vec(vec![2, 1, 1], vec![0.0, logit]).unwrap();
        let closed = graph_entropy(&t);
        let mut rng = StdRng::seed_from_u64(9);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = if rng.random_range(0.0..1.0) < p { p } else { 1.0 - p };
            let v = -x.ln();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((closed - mean).abs() < 3.0 * se, "closed {closed} mc {mean} se {se}");
    }

    #[test]
    fn hard_samples_are_binary_and_saturate() {
        let tape = Tape::new();
        let q = GraphPosterior::new(2, 1, 0.0);
        let logits = tape.param(q.logits.clone());
        let mut rng = StdRng::seed_from_u64(1);
        let s = sample_graph(&tape, &q, logits, &mut rng, true).unwrap();
        for &v in tape.value(s).data() {
            assert!(v == 0.0 || v == 1.0);
        }

        // Large logit: the soft sample saturates.
        let q2 = GraphPosterior::new(1, 0, 30.0);
        let l2 = tape.param(q2.logits.clone());
        let soft = sample_graph(&tape, &q2, l2, &mut rng, false).unwrap();
        assert!(tape.value(soft).data()[0] > 0.999999);
    }

    #[test]
    fn hard_sample_mean_is_half_at_logit_zero() {
        let tape = Tape::new();
        let q = GraphPosterior::new(1, 0, 0.0);
        let logits = tape.param(q.logits.clone());
        let mut rng = StdRng::seed_from_u64(2);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s = sample_graph(&tape, &q, logits, &mut rng, true).unwrap();
            acc += tape.value(s).data()[0];
        }
        let mean = acc / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn sample_gradient_sign_is_positive() {
        // d E[soft sample] / d logit > 0: check the pathwise gradient at
        // random logits and noises.
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..100 {
            let tape = Tape::new();
            let logit = Tensor::from_vec(vec![1, 1, 1], vec![rng.random_range(-3.0..3.0)]).unwrap();
            let lv = tape.param(logit);
            let noise = logistic_noise(&[1, 1, 1], &mut rng);
            let s = sample_graph_with_noise(&tape, lv, GUMBEL_TEMPERATURE, &noise, false).unwrap();
            let root = tape.sum_all(s);
            let mut grads = tape.backward(root).unwrap();
            let g = grads.take(lv).unwrap();
            assert!(g.data()[0] > 0.0);
        }
    }

    #[test]
    fn factor_sample_reparameterization() {
        let grid = GridSpec::regular(5, 5);
        let centers = Tensor::from_vec(vec![2, 2], vec![0.3, 0.4, 0.7, 0.6]).unwrap();
        // Wide kernel: the factor map's sensitivity to (rho, gamma) is tiny,
        // so the v -> -inf limit is visible at tight tolerance. (At sharp
        // scales the surviving e^{-20} noise still moves the factor ~1e-9.)
        let mu_gamma = 12.0;
        let mut q = FactorPosterior::from_unit_centers(&centers, mu_gamma).unwrap();

        // Near-zero variance: two different draws give identical factors.
        q.v_rho = Tensor::full(&[2], -40.0);
        q.v_gamma = Tensor::full(&[2], -40.0);
        let tape = Tape::new();
        let qv = q.lift(&tape, true);
        let mut rng = StdRng::seed_from_u64(4);
        let s1 = sample_factors(&tape, &qv, &grid, KernelFamily::Rbf, None, &mut rng, FactorLayout::PointsByNodes).unwrap();
        let s2 = sample_factors(&tape, &qv, &grid, KernelFamily::Rbf, None, &mut rng, FactorLayout::PointsByNodes).unwrap();
        let f1 = tape.value(s1.factor);
        let f2 = tape.value(s2.factor);
        for (a, b) in f1.data().iter().zip(f2.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        // The draw reproduces the deterministic factor at the mean.
        let det = crate::spatial::evaluate_factor(
            &grid,
            KernelFamily::Rbf,
            &crate::spatial::KernelParams {
                rho: centers.clone(),
                gamma: Tensor::full(&[2], mu_gamma),
                aniso: None,
            },
        )
        .unwrap();
        for (a, b) in f1.data().iter().zip(det.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        // Centers land where requested.
        let r = tape.value(s1.rho);
        assert_relative_eq!(r.at(&[0, 0]), 0.3, epsilon = 1e-7);
        assert_relative_eq!(r.at(&[1, 1]), 0.6, epsilon = 1e-7);
    }

    #[test]
    fn factor_sample_mean_matches_mu() {
        // Mean of raw gamma draws approaches mu_gamma.
        let centers = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let mut q = FactorPosterior::from_unit_centers(&centers, 1.25).unwrap();
        q.v_gamma = Tensor::full(&[1], 0.0);
        let grid = GridSpec::regular(3, 3);
        let tape = Tape::new();
        let qv = q.lift(&tape, false);
        let mut rng = StdRng::seed_from_u64(6);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s = sample_factors(&tape, &qv, &grid, KernelFamily::Rbf, None, &mut rng, FactorLayout::PointsByNodes).unwrap();
            acc += tape.value(s.gamma).data()[0];
        }
        let mean = acc / n as f64;
        let se = 1.0 / (n as f64).sqrt();
        assert!((mean - 1.25).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn factor_sample_gradients_flow() {
        let grid = GridSpec::regular(4, 4);
        let centers = Tensor::from_vec(vec![2, 2], vec![0.25, 0.5, 0.75, 0.5]).unwrap();
        let q = FactorPosterior::from_unit_centers(&centers, -2.0).unwrap();
        let eps_rho = {
            let mut rng = StdRng::seed_from_u64(7);
            Tensor::randn(&[2, 2], &mut rng)
        };
        let eps_gamma = {
            let mut rng = StdRng::seed_from_u64(8);
            Tensor::randn(&[2], &mut rng)
        };
        let report = crate::autodiff::grad_check(
            |tape, vars| {
                let qv = FactorPosteriorVars { mu_rho: vars[0], v_rho: vars[1], mu_gamma: vars[2], v_gamma: vars[3] };
                let s = sample_factors_with_noise(
                    tape,
                    &qv,
                    &grid,
                    KernelFamily::Rbf,
                    None,
                    &eps_rho,
                    &eps_gamma,
                    FactorLayout::PointsByNodes,
                )?;
                Ok(tape.sum_all(tape.square(s.factor)))
            },
            &[q.mu_rho.clone(), q.v_rho.clone(), q.mu_gamma.clone(), q.v_gamma.clone()],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        // Generic inputs move every posterior parameter.
        for e in &report.per_param {
            assert!(e.is_finite());
        }
    }

    #[test]
    fn factor_kl_closed_forms() {
        let centers = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let mut q = FactorPosterior::from_unit_centers(&centers, 0.0).unwrap();
        q.v_gamma = Tensor::zeros(&[1]);
        q.v_rho = Tensor::zeros(&[1]);
        // mu_gamma = 0, v_gamma = 0: the gamma part vanishes; only the
        // center entropy term remains.
        assert_relative_eq!(factor_kl(&q), -LN_2PI_E, max_relative = 1e-12);

        q.mu_gamma = Tensor::from_vec(vec![1], vec![2.0]).unwrap();
        assert_relative_eq!(factor_kl(&q), 2.0 - LN_2PI_E, max_relative = 1e-12);

        let tape = Tape::new();
        let qv = q.lift(&tape, true);
        let kl = factor_kl_on_tape(&tape, &qv).unwrap();
        assert_relative_eq!(tape.value_scalar(kl), factor_kl(&q), max_relative = 1e-12);
    }

    #[test]
    fn gamma_kl_matches_monte_carlo() {
        // KL(N(mu, e^v) || N(0,1)) by sampling log q - log p.
        let (mu, v): (f64, f64) = (0.8, -0.5);
        let closed = 0.5 * (v.exp() + mu * mu - 1.0 - v);
        let mut rng = StdRng::seed_from_u64(10);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        let std = (0.5 * v).exp();
        for _ in 0..n {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let x = mu + std * e;
            let logq = -0.5 * (LN_2PI + v + e * e);
            let logp = -0.5 * (LN_2PI + x * x);
            let term = logq - logp;
            sum += term;
            sumsq += term * term;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((closed - mean).abs() < 3.0 * se, "closed {closed} mc {mean} se {se}");
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let mut rng = StdRng::seed_from_u64(11);
        let enc = EncoderParams::new(&[12, 12], &[2, 3], 16, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 12, 7], &mut rng);
        let (z1, mu1, lv1) = encode_latents(&x, &enc, &mut StdRng::seed_from_u64(42)).unwrap();
        let (z2, _, _) = encode_latents(&x, &enc, &mut StdRng::seed_from_u64(42)).unwrap();
        assert_eq!(z1.shape(), &[7, 5]);
        assert_eq!(mu1.shape(), &[7, 5]);
        assert_eq!(lv1.shape(), &[7, 5]);
        assert_eq!(z1, z2);
    }

    #[test]
    fn zero_encoder_weights_give_pure_noise() {
        let mut rng = StdRng::seed_from_u64(12);
        let mut enc = EncoderParams::new(&[6], &[2], 8, &mut rng).unwrap();
        enc.for_each_param(&mut |t| *t = Tensor::zeros(t.shape()));
        let x = Tensor::randn(&[1, 6, 4], &mut rng);
        let (z, mu, lv) = encode_latents(&x, &enc, &mut StdRng::seed_from_u64(1)).unwrap();
        for &m in mu.data() {
            assert_eq!(m, 0.0);
        }
        for &v in lv.data() {
            assert_eq!(v, 0.0);
        }
        // Sample is exactly the standard normal draw.
        let mut check_rng = StdRng::seed_from_u64(1);
        for &zi in z.data() {
            let eps: f64 = check_rng.sample(rand_distr::StandardNormal);
            assert_relative_eq!(zi, eps);
        }
    }

    #[test]
    fn rows_encoding_matches_plain() {
        let mut rng = StdRng::seed_from_u64(13);
        let enc = EncoderParams::new(&[10, 8], &[2, 2], 16, &mut rng).unwrap();
        let (b, t_len) = (3, 5);
        let xs = [Tensor::randn(&[b * t_len, 10], &mut rng), Tensor::randn(&[b * t_len, 8], &mut rng)];
        let noise = Tensor::randn(&[b * t_len, 4], &mut rng);

        let tape = Tape::new();
        let ev = enc.lift(&tape, true);
        let x_vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = encode_latents_rows(&tape, &x_vars, &ev, &noise, b, t_len).unwrap();
        assert_eq!(tape.shape_of(out.z), vec![b, t_len, 4]);

        // Reassemble one (V, L, T) sample and compare its means.
        let sample_idx = 1;
        let mut mu_plain = Tensor::zeros(&[t_len, 4]);
        for v in 0..2 {
            let l = [10, 8][v];
            let mut rows = Tensor::zeros(&[t_len, l]);
            for t in 0..t_len {
                for p in 0..l {
                    rows.set(&[t, p], xs[v].at(&[sample_idx * t_len + t, p]));
                }
            }
            let m = enc.mu_nets[v].apply_plain(&rows).unwrap();
            for t in 0..t_len {
                for j in 0..2 {
                    mu_plain.set(&[t, v * 2 + j], m.at(&[t, j]));
                }
            }
        }
        let mu_tape = tape.value(out.mu);
        for t in 0..t_len {
            for j in 0..4 {
                assert_relative_eq!(
                    mu_tape.at(&[sample_idx * t_len + t, j]),
                    mu_plain.at(&[t, j]),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn gaussian_entropy_matches_monte_carlo() {
        let logvar = Tensor::from_vec(vec![3], vec![0.2, -0.7, 1.1]).unwrap();
        let closed = gaussian_entropy(&logvar);
        let mut rng = StdRng::seed_from_u64(14);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let mut term = 0.0;
            for &v in logvar.data() {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                term += 0.5 * (LN_2PI + v + e * e);
            }
            sum += term;
            sumsq += term * term;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((closed - mean).abs() < 3.0 * se, "closed {closed} mc {mean} se {se}");

        let tape = Tape::new();
        let lv = tape.param(logvar.clone());
        let h = gaussian_entropy_on_tape(&tape, lv);
        assert_relative_eq!(tape.value_scalar(h), closed, max_relative = 1e-12);
    }
}
