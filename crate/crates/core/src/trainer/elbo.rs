//! The training objective: one-sample evidence lower bound over a batch,
//! with the graph sparsity prior and the augmented-Lagrangian acyclicity
//! penalty folded in, plus the model container that owns every learnable
//! parameter group.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scm::{
    acyclicity_on_tape, latent_loglik_linear_on_tape,
    latent_loglik_nonlinear_terms_on_tape, LinearScmParams, LinearScmVars, NoiseStats,
    NonlinearScmParams, NonlinearScmVars, LN_2PI,
};
use crate::spatial::{FactorLayout, GridSpec, KernelFamily};
use crate::trainer::decoder::{decode_rows_on_tape, DecoderParams, DecoderVars};
use crate::variational::{
    encode_latents_rows, factor_kl_on_tape, feasible_edge_mask, gaussian_entropy_on_tape,
    graph_entropy_on_tape, logistic_noise, sample_factors_with_noise, sample_graph_with_noise,
    EncoderParams, EncoderVars, FactorPosterior, FactorPosteriorVars, GraphPosterior,
};
use rand::Rng;

/// Latent transition family.
#[derive(Debug, Clone)]
pub enum ScmParams {
    Linear(LinearScmParams),
    Nonlinear(Box<NonlinearScmParams>),
}

pub enum ScmVars {
    Linear(LinearScmVars),
    Nonlinear(NonlinearScmVars),
}

/// Parameter groups, in flatten order. Each group gets its own learning
/// rate and optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Graph = 0,
    Scm = 1,
    Encoder = 2,
    Factors = 3,
    Decoder = 4,
}

pub const GROUPS: [Group; 5] = [Group::Graph, Group::Scm, Group::Encoder, Group::Factors, Group::Decoder];

/// Everything the pipeline learns, plus the fixed geometry it learns over.
#[derive(Debug, Clone)]
pub struct Model {
    pub grid: GridSpec,
    pub family: KernelFamily,
    /// Latent nodes per variate; their sum is D.
    pub partition: Vec<usize>,
    pub tau: usize,
    pub graph: GraphPosterior,
    pub scm: ScmParams,
    pub noise_stats: NoiseStats,
    pub encoder: EncoderParams,
    pub factors: Vec<FactorPosterior>,
    pub decoder: DecoderParams,
}

/// Construction-time knobs for [`Model::new`]; widths are configurable so
/// tests can run tiny instances.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub grid: GridSpec,
    pub family: KernelFamily,
    pub partition: Vec<usize>,
    pub tau: usize,
    pub linear_scm: bool,
    pub linear_decoder: bool,
    pub scm_embed: usize,
    pub scm_width: usize,
    pub encoder_width: usize,
    pub decoder_embed: usize,
    pub decoder_width: usize,
    pub per_point_noise: bool,
}

impl Model {
    pub fn new<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        if spec.partition.is_empty() || spec.partition.contains(&0) {
            return Err(Error::Validation(format!("bad node partition {:?}", spec.partition)));
        }
        let d: usize = spec.partition.iter().sum();
        let l = spec.grid.len();
        let n_var = spec.partition.len();
        let graph = GraphPosterior::new(d, spec.tau, 0.0);
        let scm = if spec.linear_scm {
            ScmParams::Linear(LinearScmParams::zeros(d, spec.tau))
        } else {
            ScmParams::Nonlinear(Box::new(NonlinearScmParams::with_width(
                d,
                spec.tau,
                spec.scm_embed,
                spec.scm_width,
                rng,
            )))
        };
        let points = vec![l; n_var];
        let encoder = EncoderParams::new(&points, &spec.partition, spec.encoder_width, rng)?;
        let mut factors = Vec::with_capacity(n_var);
        for &dv in &spec.partition {
            let mut centers = Tensor::zeros(&[dv, 2]);
            for c in centers.data_mut() {
                *c = rng.random_range(0.1..0.9);
            }
            // Log-scales start at a mid-size kernel footprint on the unit
            // square (squared scale ~0.01).
            factors.push(FactorPosterior::from_unit_centers(&centers, -4.6)?);
        }
        let decoder = if spec.linear_decoder {
            DecoderParams::linear(n_var, l, spec.per_point_noise)
        } else {
            DecoderParams::nonlinear(
                n_var,
                l,
                spec.decoder_embed,
                spec.decoder_width,
                spec.per_point_noise,
                rng,
            )?
        };
        Ok(Self {
            grid: spec.grid.clone(),
            family: spec.family,
            partition: spec.partition.clone(),
            tau: spec.tau,
            graph,
            scm,
            noise_stats: NoiseStats::identity(d),
            encoder,
            factors,
            decoder,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.partition.iter().sum()
    }

    pub fn num_variates(&self) -> usize {
        self.partition.len()
    }

    /// Visits one group's parameters in the canonical flatten order.
    pub fn visit_group(&mut self, group: Group, f: &mut impl FnMut(&mut Tensor)) {
        match group {
            Group::Graph => f(&mut self.graph.logits),
            Group::Scm => match &mut self.scm {
                ScmParams::Linear(p) => p.for_each_param(f),
                ScmParams::Nonlinear(p) => p.for_each_param(f),
            },
            Group::Encoder => self.encoder.for_each_param(f),
            Group::Factors => {
                for q in &mut self.factors {
                    q.for_each_param(f);
                }
            }
            Group::Decoder => self.decoder.for_each_param(f),
        }
    }

    pub fn collect_group(&mut self, group: Group) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_group(group, &mut |t| out.push(t.clone()));
        out
    }

    /// All parameters, group by group, in flatten order.
    pub fn collect_all(&mut self) -> Vec<Vec<Tensor>> {
        GROUPS.iter().map(|&g| self.collect_group(g)).collect()
    }

    /// Writes back parameters collected with [`Model::collect_all`].
    pub fn restore_all(&mut self, groups: &[Vec<Tensor>]) -> Result<()> {
        if groups.len() != GROUPS.len() {
            return Err(Error::shape("restore params", format!("{} groups", groups.len())));
        }
        for (gi, &g) in GROUPS.iter().enumerate() {
            let mut i = 0;
            let mut bad = false;
            self.visit_group(g, &mut |t| {
                if i < groups[gi].len() && groups[gi][i].shape() == t.shape() {
                    *t = groups[gi][i].clone();
                } else {
                    bad = true;
                }
                i += 1;
            });
            if bad || i != groups[gi].len() {
                return Err(Error::shape("restore params", format!("group {gi} mismatch")));
            }
        }
        Ok(())
    }
}

/// Tape handles for every lifted parameter, preserving group order so
/// gradients can be routed back to the optimizer.
pub struct ModelVars {
    pub graph_logits: Var,
    pub scm: ScmVars,
    pub encoder: EncoderVars,
    pub factors: Vec<FactorPosteriorVars>,
    pub decoder: DecoderVars,
    /// Lifted vars per group, in flatten order.
    pub group_vars: Vec<Vec<Var>>,
}

impl ModelVars {
    /// Registers all parameters on the tape. Frozen groups are lifted as
    /// constants: no gradient is computed or applied for them.
    pub fn lift(tape: &Tape, model: &mut Model, freeze_graph_scm: bool) -> Self {
        let groups = model.collect_all();
        let mut group_vars = Vec::with_capacity(groups.len());
        for (gi, tensors) in groups.iter().enumerate() {
            let frozen =
                freeze_graph_scm && (gi == Group::Graph as usize || gi == Group::Scm as usize);
            let vars: Vec<Var> = tensors
                .iter()
                .map(|t| if frozen { tape.constant(t.clone()) } else { tape.param(t.clone()) })
                .collect();
            group_vars.push(vars);
        }
        Self::from_group_vars(model, group_vars)
    }

    /// Rebuilds the typed views from pre-registered group vars (used by both
    /// `lift` and finite-difference drivers).
    pub fn from_group_vars(model: &Model, group_vars: Vec<Vec<Var>>) -> Self {
        let graph_logits = group_vars[Group::Graph as usize][0];
        let scm_vars = &group_vars[Group::Scm as usize];
        let scm = match &model.scm {
            ScmParams::Linear(_) => ScmVars::Linear(LinearScmVars {
                weights: scm_vars[0],
                noise_logvar: scm_vars[1],
            }),
            ScmParams::Nonlinear(p) => ScmVars::Nonlinear(p.vars_from_slice(scm_vars)),
        };
        let enc_vars = &group_vars[Group::Encoder as usize];
        let mut cursor = 0;
        let mut mu_nets = Vec::with_capacity(model.encoder.mu_nets.len());
        for net in &model.encoder.mu_nets {
            mu_nets.push(net.vars_from_slice(enc_vars, &mut cursor));
        }
        let mut logvar_nets = Vec::with_capacity(model.encoder.logvar_nets.len());
        for net in &model.encoder.logvar_nets {
            logvar_nets.push(net.vars_from_slice(enc_vars, &mut cursor));
        }
        let encoder = EncoderVars { mu_nets, logvar_nets };
        let fac_vars = &group_vars[Group::Factors as usize];
        let mut factors = Vec::with_capacity(model.factors.len());
        for (i, _) in model.factors.iter().enumerate() {
            factors.push(FactorPosteriorVars {
                mu_rho: fac_vars[4 * i],
                v_rho: fac_vars[4 * i + 1],
                mu_gamma: fac_vars[4 * i + 2],
                v_gamma: fac_vars[4 * i + 3],
            });
        }
        let dec_vars = &group_vars[Group::Decoder as usize];
        let mut cursor = 0;
        let decoder = model.decoder.vars_from_slice(dec_vars, &mut cursor);
        Self { graph_logits, scm, encoder, factors, decoder, group_vars }
    }
}

/// One training batch, already laid out as per-variate row matrices: row
/// `i*T + t` of `x_rows[v]` is batch sample i's variate-v snapshot at t.
pub struct BatchRows {
    pub x_rows: Vec<Tensor>,
    pub b: usize,
    pub t_len: usize,
}

/// Pre-drawn noise for one objective evaluation, so the computation is a
/// deterministic function of (parameters, batch, noise).
pub struct ElboNoise {
    pub graph: Tensor,
    pub encoder: Tensor,
    pub eps_rho: Vec<Tensor>,
    pub eps_gamma: Vec<Tensor>,
}

impl ElboNoise {
    pub fn draw<R: Rng>(model: &Model, b: usize, t_len: usize, rng: &mut R) -> Self {
        let d = model.num_nodes();
        let graph = logistic_noise(&[model.tau + 1, d, d], rng);
        let encoder = Tensor::randn(&[b * t_len, d], rng);
        let mut eps_rho = Vec::with_capacity(model.partition.len());
        let mut eps_gamma = Vec::with_capacity(model.partition.len());
        for &dv in &model.partition {
            eps_rho.push(Tensor::randn(&[dv, 2], rng));
            eps_gamma.push(Tensor::randn(&[dv], rng));
        }
        Self { graph, encoder, eps_rho, eps_gamma }
    }
}

/// Objective controls for one evaluation.
#[derive(Debug, Clone)]
pub struct ElboSettings {
    /// Sparsity strength on edge probabilities.
    pub alpha: f64,
    /// Augmented-Lagrangian multiplier.
    pub lambda_al: f64,
    /// Augmented-Lagrangian penalty coefficient.
    pub c_al: f64,
    /// Dataset-over-batch scale applied to the per-sample terms.
    pub scale: f64,
    /// Hard (straight-through) graph samples; soft keeps the objective
    /// smooth for finite-difference checks.
    pub hard_graph: bool,
}

/// Term breakdown, as unscaled batch sums (per-sample terms) and global
/// values (graph/factor terms); `elbo` is the scaled objective.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub elbo: f64,
    pub recon: f64,
    pub latent: f64,
    pub z_entropy: f64,
    pub graph_entropy: f64,
    pub sparsity: f64,
    pub factor_kl: f64,
    pub acyc_h: f64,
    pub acyc_penalty: f64,
}

pub struct ElboOutcome {
    /// The scaled objective on the tape (to be maximized).
    pub objective: Var,
    pub terms: ElboTerms,
    /// Raw latent residuals (nonlinear transitions only), for running
    /// noise-statistics refreshes from their detached values.
    pub residuals: Option<Var>,
}

/// Assembles the one-sample ELBO over a batch:
/// scale * sum_batch[ recon + latent + H(q(Z|X)) ]
///   + H(q(G)) - alpha * sum sigmoid(W) - KL(q(F)) - (lambda*h + c/2 h^2).
pub fn elbo_on_tape(
    tape: &Tape,
    mv: &ModelVars,
    model: &Model,
    batch: &BatchRows,
    noise: &ElboNoise,
    set: &ElboSettings,
) -> Result<ElboOutcome> {
    if batch.b == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    let d = model.num_nodes();
    let rows = batch.b * batch.t_len;
    if batch.x_rows.len() != model.num_variates() {
        return Err(Error::shape(
            "elbo",
            format!("{} variates in batch vs {}", batch.x_rows.len(), model.num_variates()),
        ));
    }

    // q(Z|X): encode, sample.
    let x_vars: Vec<Var> = batch.x_rows.iter().map(|x| tape.constant(x.clone())).collect();
    let enc = encode_latents_rows(tape, &x_vars, &mv.encoder, &noise.encoder, batch.b, batch.t_len)?;

    // q(G): one relaxed/straight-through sample.
    let g_sample = sample_graph_with_noise(
        tape,
        mv.graph_logits,
        model.graph.temperature,
        &noise.graph,
        set.hard_graph,
    )?;

    // q(F): one reparameterized draw per variate, factors as (D_v, L).
    let mut factor_blocks = Vec::with_capacity(model.factors.len());
    for (v, q) in mv.factors.iter().enumerate() {
        let s = sample_factors_with_noise(
            tape,
            q,
            &model.grid,
            model.family,
            None,
            &noise.eps_rho[v],
            &noise.eps_gamma[v],
            FactorLayout::NodesByPoints,
        )?;
        factor_blocks.push(s.factor);
    }

    // Reconstruction log-density.
    let xhat = decode_rows_on_tape(
        tape,
        enc.z_rows,
        &factor_blocks,
        &model.partition,
        &mv.decoder,
        model.decoder.embed_dim(),
    )?;
    let mut recon: Option<Var> = None;
    for (v, xh) in xhat.iter().enumerate() {
        let l = tape.shape_of(*xh)[1];
        let lv = tape.slice(mv.decoder.obs_logvar, 0, v, v + 1)?;
        let lv = if model.decoder.per_point {
            tape.reshape(lv, &[1, l])?
        } else {
            tape.reshape(lv, &[1])?
        };
        let lv_full = tape.broadcast_to(lv, &[rows, l])?;
        let diff = tape.sub(*xh, x_vars[v])?;
        let quad = tape.mul(tape.square(diff), tape.exp(tape.neg(lv_full)))?;
        let sum = tape.add(tape.sum_all(quad), tape.sum_all(lv_full))?;
        let term = tape.add_scalar(tape.scale(sum, -0.5), -0.5 * LN_2PI * (rows * l) as f64);
        recon = Some(match recon {
            Some(r) => tape.add(r, term)?,
            None => term,
        });
    }
    let recon = recon.expect("at least one variate");

    // Latent transition log-density under the sampled graph.
    let (latent, residuals) = match &mv.scm {
        ScmVars::Linear(p) => {
            (latent_loglik_linear_on_tape(tape, enc.z, g_sample, p)?, None)
        }
        ScmVars::Nonlinear(p) => {
            let (ll, resid) =
                latent_loglik_nonlinear_terms_on_tape(tape, enc.z, g_sample, p, &model.noise_stats)?;
            (ll, Some(resid))
        }
    };

    // Entropies, prior, penalty.
    let z_ent = gaussian_entropy_on_tape(tape, enc.logvar);
    let g_ent = graph_entropy_on_tape(tape, mv.graph_logits)?;
    let mask = tape.constant(feasible_edge_mask(model.tau, d));
    let probs = tape.mul(tape.sigmoid(mv.graph_logits), mask)?;
    let sparsity = tape.scale(tape.sum_all(probs), -set.alpha);
    let p0 = tape.reshape(tape.slice(probs, 0, 0, 1)?, &[d, d])?;
    let h = acyclicity_on_tape(tape, p0)?;
    let penalty = tape.add(
        tape.scale(h, set.lambda_al),
        tape.scale(tape.square(h), 0.5 * set.c_al),
    )?;
    let mut kl: Option<Var> = None;
    for q in &mv.factors {
        let k = factor_kl_on_tape(tape, q)?;
        kl = Some(match kl {
            Some(a) => tape.add(a, k)?,
            None => k,
        });
    }
    let kl = kl.expect("at least one variate");

    let per_sample = tape.add(tape.add(recon, latent)?, z_ent)?;
    let global = tape.sub(tape.sub(tape.add(g_ent, sparsity)?, kl)?, penalty)?;
    let objective = tape.add(tape.scale(per_sample, set.scale), global)?;

    let terms = ElboTerms {
        elbo: tape.value_scalar(objective),
        recon: tape.value_scalar(recon),
        latent: tape.value_scalar(latent),
        z_entropy: tape.value_scalar(z_ent),
        graph_entropy: tape.value_scalar(g_ent),
        sparsity: tape.value_scalar(sparsity),
        factor_kl: tape.value_scalar(kl),
        acyc_h: tape.value_scalar(h),
        acyc_penalty: tape.value_scalar(penalty),
    };
    if !terms.elbo.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite objective: recon {}, latent {}, z_entropy {}, graph_entropy {}, \
             sparsity {}, factor_kl {}, h {}",
            terms.recon,
            terms.latent,
            terms.z_entropy,
            terms.graph_entropy,
            terms.sparsity,
            terms.factor_kl,
            terms.acyc_h,
        )));
    }
    Ok(ElboOutcome { objective, terms, residuals })
}
