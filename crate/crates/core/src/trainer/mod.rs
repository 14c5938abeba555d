//! Training: configuration schema, the augmented-Lagrangian outer schedule
//! with its freeze curriculum, seeded batching with a validation plateau
//! exit, CSV step logging, and greedy DAG extraction from the learned
//! edge probabilities.

pub mod decoder;
pub mod elbo;
pub mod optim;

pub use decoder::{decode, decode_rows_on_tape, DecoderParams, DecoderVars};
pub use elbo::{
    elbo_on_tape, BatchRows, ElboNoise, ElboOutcome, ElboSettings, ElboTerms, Group, Model,
    ModelSpec, ModelVars, ScmParams, ScmVars, GROUPS,
};
pub use optim::AdamState;

use crate::autodiff::{sigmoid_stable, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scm::{acyclicity, TemporalGraph};
use crate::spatial::{evaluate_factor, GridSpec, KernelFamily, KernelParams};
use crate::variational::GraphPosterior;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Steps between validation evaluations.
pub const VAL_INTERVAL: u64 = 100;
/// Inner loop exits once validation fails to improve for this many steps.
pub const PLATEAU_STEPS: u64 = 500;
/// Relative improvement threshold for the plateau rule.
pub const PLATEAU_REL: f64 = 1e-3;
/// Momentum of the residual-statistics moving average (nonlinear SCM).
pub const NOISE_STATS_MOMENTUM: f64 = 0.05;

/// Header of the training log; one CSV row per step.
pub const LOG_HEADER: &str =
    "step,outer,epoch,elbo,recon,latent,z_entropy,graph_entropy,sparsity,factor_kl,h,penalty,c,lambda,val_elbo";

/// Run configuration. Unknown keys are rejected on parse; omitted keys take
/// the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate of the graph logits.
    pub lr_matrix: f64,
    pub lr_scm: f64,
    pub lr_encoder: f64,
    /// Learning rate of the spatial factor posteriors.
    pub lr_factor: f64,
    pub lr_decoder: f64,
    /// Outer augmented-Lagrangian steps.
    pub outer_auglag: usize,
    /// Max gradient steps per outer step.
    pub inner_auglag: usize,
    /// Embedding width of the nonlinear transition nets.
    pub scm_embed: usize,
    pub sparsity_alpha: f64,
    /// Noise flow family; only "quadratic" is implemented.
    pub spline: String,
    /// Grid-point embedding width of the nonlinear decoder.
    pub decoder_embed: usize,
    pub batch_size: usize,
    /// Graph and transition parameters stay frozen for this many epochs
    /// (and never unfreeze before the third outer step).
    pub freeze_epochs: usize,
    pub seed: u64,
    /// Numeric mode; only "f64" is implemented.
    pub precision: String,
    /// Total latent nodes D.
    pub num_nodes: usize,
    /// Per-variate node counts; must sum to `num_nodes`. One variate with
    /// all nodes when omitted.
    pub nodes_per_variate: Option<Vec<usize>>,
    /// Maximum lag of the temporal graph.
    pub tau: usize,
    /// Latent transition family: "linear" | "nonlinear".
    pub scm_kind: String,
    /// Grid mapping family: "linear" | "nonlinear".
    pub mapping_kind: String,
    /// Spatial kernel: "rbf" | "matern15" | "matern25".
    pub kernel: String,
    /// Learn one observation noise per grid point instead of per variate.
    pub obs_noise_per_point: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_matrix: 1e-3,
            lr_scm: 1e-3,
            lr_encoder: 1e-3,
            lr_factor: 1e-2,
            lr_decoder: 1e-3,
            outer_auglag: 60,
            inner_auglag: 6000,
            scm_embed: 64,
            sparsity_alpha: 10.0,
            spline: "quadratic".to_string(),
            decoder_embed: 32,
            batch_size: 100,
            freeze_epochs: 200,
            seed: 0,
            precision: "f64".to_string(),
            num_nodes: 10,
            nodes_per_variate: None,
            tau: 2,
            scm_kind: "linear".to_string(),
            mapping_kind: "linear".to_string(),
            kernel: "rbf".to_string(),
            obs_noise_per_point: false,
        }
    }
}

impl TrainConfig {
    /// Rates may be zero (a zero-rate group simply stays put) but never
    /// negative or non-finite.
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        let rates = [
            ("lr_matrix", self.lr_matrix),
            ("lr_scm", self.lr_scm),
            ("lr_encoder", self.lr_encoder),
            ("lr_factor", self.lr_factor),
            ("lr_decoder", self.lr_decoder),
        ];
        for (name, r) in rates {
            if !r.is_finite() || r < 0.0 {
                return cfg(format!("{name} must be a finite non-negative rate, got {r}"));
            }
        }
        if self.outer_auglag == 0 || self.inner_auglag == 0 {
            return cfg("outer_auglag and inner_auglag must be at least 1".to_string());
        }
        if !self.sparsity_alpha.is_finite() || self.sparsity_alpha < 0.0 {
            return cfg(format!("sparsity_alpha must be non-negative, got {}", self.sparsity_alpha));
        }
        if self.spline != "quadratic" {
            return cfg(format!("spline \"{}\" is not supported (only \"quadratic\")", self.spline));
        }
        if self.precision != "f64" {
            return cfg(format!("precision \"{}\" is not supported (only \"f64\")", self.precision));
        }
        if self.batch_size == 0 {
            return cfg("batch_size must be at least 1".to_string());
        }
        if self.num_nodes == 0 {
            return cfg("num_nodes must be at least 1".to_string());
        }
        if self.tau == 0 {
            return cfg("tau must be at least 1".to_string());
        }
        if let Some(parts) = &self.nodes_per_variate {
            if parts.is_empty() || parts.contains(&0) {
                return cfg(format!("nodes_per_variate must be positive, got {parts:?}"));
            }
            let sum: usize = parts.iter().sum();
            if sum != self.num_nodes {
                return cfg(format!(
                    "nodes_per_variate sums to {sum}, expected num_nodes = {}",
                    self.num_nodes
                ));
            }
        }
        match self.scm_kind.as_str() {
            "linear" | "nonlinear" => {}
            other => return cfg(format!("scm_kind \"{other}\" (expected linear | nonlinear)")),
        }
        match self.mapping_kind.as_str() {
            "linear" | "nonlinear" => {}
            other => return cfg(format!("mapping_kind \"{other}\" (expected linear | nonlinear)")),
        }
        self.kernel_family()?;
        if self.scm_kind == "nonlinear" && self.scm_embed == 0 {
            return cfg("scm_embed must be at least 1 for the nonlinear transitions".to_string());
        }
        if self.mapping_kind == "nonlinear" && self.decoder_embed == 0 {
            return cfg("decoder_embed must be at least 1 for the nonlinear decoder".to_string());
        }
        // An epoch consumes at least one step; the freeze window must be
        // able to end within the step budget.
        if self.freeze_epochs >= self.outer_auglag.saturating_mul(self.inner_auglag) {
            return cfg(format!(
                "freeze_epochs {} exceeds the training budget of {} steps",
                self.freeze_epochs,
                self.outer_auglag * self.inner_auglag
            ));
        }
        Ok(())
    }

    pub fn kernel_family(&self) -> Result<KernelFamily> {
        match self.kernel.as_str() {
            "rbf" => Ok(KernelFamily::Rbf),
            "matern15" => Ok(KernelFamily::Matern15),
            "matern25" => Ok(KernelFamily::Matern25),
            other => Err(Error::Config(format!(
                "kernel \"{other}\" (expected rbf | matern15 | matern25)"
            ))),
        }
    }

    pub fn partition(&self) -> Vec<usize> {
        self.nodes_per_variate.clone().unwrap_or_else(|| vec![self.num_nodes])
    }

    pub fn model_spec(&self, grid: GridSpec) -> Result<ModelSpec> {
        Ok(ModelSpec {
            grid,
            family: self.kernel_family()?,
            partition: self.partition(),
            tau: self.tau,
            linear_scm: self.scm_kind == "linear",
            linear_decoder: self.mapping_kind == "linear",
            scm_embed: self.scm_embed,
            scm_width: 64,
            encoder_width: 64,
            decoder_embed: self.decoder_embed,
            decoder_width: 64,
            per_point_noise: self.obs_noise_per_point,
        })
    }
}

/// Training data, pre-laid as per-variate row matrices: row `n*T + t` of
/// `rows[v]` is sample n's variate-v grid snapshot at time t. This single
/// layout serves as both encoder input and reconstruction target.
pub struct TrainData {
    pub rows: Vec<Tensor>,
    pub n: usize,
    pub t_len: usize,
    pub grid: GridSpec,
}

impl TrainData {
    /// Lays out an `(N, V, L, T)` observation block.
    pub fn from_observations(x: &Tensor, grid: GridSpec) -> Result<Self> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("train data", format!("observations {s:?}, want (N,V,L,T)")));
        }
        let (n, n_var, l, t_len) = (s[0], s[1], s[2], s[3]);
        if n == 0 || n_var == 0 || t_len == 0 {
            return Err(Error::shape("train data", format!("empty axis in {s:?}")));
        }
        if l != grid.len() {
            return Err(Error::shape(
                "train data",
                format!("{l} grid points in observations vs {} in the grid", grid.len()),
            ));
        }
        let data = x.data();
        let mut rows = Vec::with_capacity(n_var);
        for v in 0..n_var {
            let mut m = Tensor::zeros(&[n * t_len, l]);
            let md = m.data_mut();
            for ni in 0..n {
                for li in 0..l {
                    let src = ((ni * n_var + v) * l + li) * t_len;
                    for t in 0..t_len {
                        md[(ni * t_len + t) * l + li] = data[src + t];
                    }
                }
            }
            rows.push(m);
        }
        Ok(Self { rows, n, t_len, grid })
    }

    pub fn batch(&self, idx: &[usize]) -> BatchRows {
        let l_each: Vec<usize> = self.rows.iter().map(|r| r.shape()[1]).collect();
        let mut x_rows = Vec::with_capacity(self.rows.len());
        for (v, r) in self.rows.iter().enumerate() {
            let l = l_each[v];
            let mut m = Tensor::zeros(&[idx.len() * self.t_len, l]);
            for (bi, &ni) in idx.iter().enumerate() {
                let src = ni * self.t_len * l;
                let dst = bi * self.t_len * l;
                m.data_mut()[dst..dst + self.t_len * l]
                    .copy_from_slice(&r.data()[src..src + self.t_len * l]);
            }
            x_rows.push(m);
        }
        BatchRows { x_rows, b: idx.len(), t_len: self.t_len }
    }
}

/// Everything a training run accumulates: the model, per-group optimizer
/// state, the constraint schedule, counters, and the generator state.
pub struct RunState {
    pub model: Model,
    pub adam: Vec<AdamState>,
    pub lambda_al: f64,
    pub c_al: f64,
    pub h_prev: f64,
    pub outer_step: usize,
    pub global_step: u64,
    pub epoch: usize,
    pub best_val: f64,
    pub rng: ChaCha20Rng,
}

impl RunState {
    pub fn extract_graph(&self, threshold: f64) -> Result<TemporalGraph> {
        extract_graph(&self.model.graph, threshold)
    }
}

/// Thresholds the edge probabilities, then greedily drops the weakest
/// cycle-participating instantaneous edges until that slice is a DAG.
pub fn extract_graph(posterior: &GraphPosterior, threshold: f64) -> Result<TemporalGraph> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::domain("extract graph", format!("threshold {threshold} outside (0,1)")));
    }
    let probs = posterior.edge_probs();
    let shape = probs.shape().to_vec();
    let d = shape[1];
    let mut g = Tensor::zeros(&shape);
    for (gi, &p) in g.data_mut().iter_mut().zip(probs.data()) {
        *gi = if p > threshold { 1.0 } else { 0.0 };
    }
    loop {
        // Present instantaneous edges, weakest-first among those on a cycle.
        let mut worst: Option<(f64, usize, usize)> = None;
        for u in 0..d {
            for v in 0..d {
                if g.at(&[0, u, v]) == 0.0 {
                    continue;
                }
                if !reaches(&g, d, v, u) {
                    continue;
                }
                let p = probs.at(&[0, u, v]);
                if worst.map_or(true, |(wp, _, _)| p < wp) {
                    worst = Some((p, u, v));
                }
            }
        }
        match worst {
            Some((_, u, v)) => g.set(&[0, u, v], 0.0),
            None => break,
        }
    }
    TemporalGraph::new(g)
}

/// Encoder posterior means over the full dataset, shaped `(N, D, T)`.
pub fn posterior_mean_latents(model: &Model, data: &TrainData) -> Result<Tensor> {
    if data.rows.len() != model.partition.len() {
        return Err(Error::shape(
            "posterior means",
            format!("{} variates in data, {} in the model", data.rows.len(), model.partition.len()),
        ));
    }
    let d: usize = model.partition.iter().sum();
    let (n, t_len) = (data.n, data.t_len);
    let mut out = Tensor::zeros(&[n, d, t_len]);
    let mut offset = 0usize;
    for (v, rows) in data.rows.iter().enumerate() {
        let mu = model.encoder.mu_nets[v].apply_plain(rows)?;
        for i in 0..n {
            for t in 0..t_len {
                for dd in 0..model.partition[v] {
                    out.set(&[i, offset + dd, t], mu.at(&[i * t_len + t, dd]));
                }
            }
        }
        offset += model.partition[v];
    }
    Ok(out)
}

/// Posterior-mean spatial factors for one variate: the evaluated `(L, D_v)`
/// matrix plus the unit-square centers and log-scales it evaluates at.
pub struct FactorMeans {
    pub matrix: Tensor,
    /// `(D_v, 2)` centers in [0,1]^2.
    pub centers_unit: Tensor,
    /// `(D_v,)` log squared scales.
    pub log_scales: Tensor,
}

/// Evaluates every variate's factor matrix at the posterior means (zero
/// sampling noise).
pub fn factor_means(model: &Model) -> Result<Vec<FactorMeans>> {
    let (scale, offset) = model.grid.unit_to_domain();
    model
        .factors
        .iter()
        .map(|q| {
            let dv = q.mu_rho.shape()[0];
            let unit = q.mu_rho.map(sigmoid_stable);
            let mut rho = Tensor::zeros(&[dv, 2]);
            for i in 0..dv {
                for c in 0..2 {
                    rho.set(&[i, c], unit.at(&[i, c]) * scale[c] + offset[c]);
                }
            }
            let params = KernelParams { rho, gamma: q.mu_gamma.clone(), aniso: None };
            let matrix = evaluate_factor(&model.grid, model.family, &params)?;
            Ok(FactorMeans { matrix, centers_unit: unit, log_scales: q.mu_gamma.clone() })
        })
        .collect()
}

/// BFS over present instantaneous edges; `from == to` counts as reached,
/// so self-loops register as cycles.
fn reaches(g: &Tensor, d: usize, from: usize, to: usize) -> bool {
    if from == to {
        return true;
    }
    let mut seen = vec![false; d];
    let mut queue = vec![from];
    seen[from] = true;
    while let Some(u) = queue.pop() {
        for v in 0..d {
            if g.at(&[0, u, v]) == 1.0 && !seen[v] {
                if v == to {
                    return true;
                }
                seen[v] = true;
                queue.push(v);
            }
        }
    }
    false
}

fn log_err(e: std::io::Error) -> Error {
    Error::io("training log", e)
}

/// Instantaneous-slice constraint value of the current edge probabilities.
fn graph_h(model: &Model) -> Result<f64> {
    let d = model.num_nodes();
    let probs = model.graph.edge_probs();
    let mut p0 = Tensor::zeros(&[d, d]);
    p0.data_mut().copy_from_slice(&probs.data()[..d * d]);
    acyclicity(&p0)
}

/// Validation bound: per-sample terms summed over the held-out set in
/// batches, global terms added once. Noise is redrawn from a fixed stream
/// each call so consecutive values are comparable.
fn validation_elbo(
    model: &mut Model,
    data: &TrainData,
    val_idx: &[usize],
    cfg: &TrainConfig,
    lambda_al: f64,
    c_al: f64,
) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut per_sample = 0.0;
    let mut global = None;
    for chunk in val_idx.chunks(cfg.batch_size) {
        let batch = data.batch(chunk);
        let noise = ElboNoise::draw(model, batch.b, data.t_len, &mut rng);
        let set = ElboSettings {
            alpha: cfg.sparsity_alpha,
            lambda_al,
            c_al,
            scale: 1.0,
            hard_graph: true,
        };
        let tape = Tape::new();
        let mv = ModelVars::lift(&tape, model, false);
        let out = elbo_on_tape(&tape, &mv, model, &batch, &noise, &set)?;
        per_sample += out.terms.recon + out.terms.latent + out.terms.z_entropy;
        global = Some(
            out.terms.graph_entropy + out.terms.sparsity
                - out.terms.factor_kl
                - out.terms.acyc_penalty,
        );
    }
    Ok(per_sample + global.unwrap_or(0.0))
}

/// Runs the full curriculum and returns the final state. `log` receives one
/// CSV row per step (see [`LOG_HEADER`]).
pub fn train(
    data: &TrainData,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<RunState> {
    cfg.validate()?;
    let partition = cfg.partition();
    if data.rows.len() != partition.len() {
        return Err(Error::shape(
            "train",
            format!("{} variates in data vs {} configured", data.rows.len(), partition.len()),
        ));
    }
    for r in &data.rows {
        let s = r.shape();
        if s != [data.n * data.t_len, data.grid.len()] {
            return Err(Error::shape("train", format!("row matrix {s:?}")));
        }
    }
    if data.t_len <= cfg.tau {
        return Err(Error::Validation(format!(
            "series length {} does not exceed the lag horizon {}",
            data.t_len, cfg.tau
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(&cfg.model_spec(data.grid.clone())?, &mut rng)?;
    let mut adam: Vec<AdamState> = (0..GROUPS.len()).map(|_| AdamState::new()).collect();
    let lrs = [cfg.lr_matrix, cfg.lr_scm, cfg.lr_encoder, cfg.lr_factor, cfg.lr_decoder];

    // 80/20 split over samples, shuffled once up front.
    let n_train = ((0.8 * data.n as f64).ceil() as usize).clamp(1, data.n);
    let mut split: Vec<usize> = (0..data.n).collect();
    split.shuffle(&mut rng);
    let (train_idx, val_idx) = split.split_at(n_train);

    let (mut lambda_al, mut c_al, mut h_prev) = (0.0f64, 1.0f64, f64::INFINITY);
    let mut epoch = 0usize;
    let mut order = train_idx.to_vec();
    order.shuffle(&mut rng);
    let mut pos = 0usize;
    let mut global_step = 0u64;
    let mut best_val = f64::NEG_INFINITY;
    let mut outer_done = 0usize;

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(log_err)?;
    }

    for outer in 0..cfg.outer_auglag {
        let mut inner_best = f64::NEG_INFINITY;
        let mut last_improve = global_step;
        for _ in 0..cfg.inner_auglag {
            if pos >= order.len() {
                order.shuffle(&mut rng);
                pos = 0;
                epoch += 1;
            }
            let end = (pos + cfg.batch_size).min(order.len());
            let batch_idx = &order[pos..end];
            pos = end;

            // Graph and transitions stay frozen through the freeze window
            // and the first two outer steps, whichever ends later.
            let frozen = epoch < cfg.freeze_epochs || outer < 2;

            let batch = data.batch(batch_idx);
            let noise = ElboNoise::draw(&model, batch.b, data.t_len, &mut rng);
            let set = ElboSettings {
                alpha: cfg.sparsity_alpha,
                lambda_al,
                c_al,
                scale: n_train as f64 / batch.b as f64,
                hard_graph: true,
            };
            let tape = Tape::new();
            let mv = ModelVars::lift(&tape, &mut model, frozen);
            let out = elbo_on_tape(&tape, &mv, &model, &batch, &noise, &set)?;
            let loss = tape.neg(out.objective);
            let mut grads = tape.backward(loss)?;

            for (gi, &group) in GROUPS.iter().enumerate() {
                if frozen && (group == Group::Graph || group == Group::Scm) {
                    continue;
                }
                let grad_opts: Vec<Option<Tensor>> =
                    mv.group_vars[gi].iter().map(|&v| grads.take(v)).collect();
                let mut current = model.collect_group(group);
                {
                    let mut refs: Vec<&mut Tensor> = current.iter_mut().collect();
                    adam[gi].step(lrs[gi], &mut refs, &grad_opts)?;
                }
                let mut next = current.into_iter();
                model.visit_group(group, &mut |t| *t = next.next().expect("group size"));
            }

            if let Some(resid) = out.residuals {
                let detached = tape.value(resid);
                model.noise_stats.update(&detached, NOISE_STATS_MOMENTUM)?;
            }

            global_step += 1;
            let mut val_cell = String::new();
            let mut plateau = false;
            if !val_idx.is_empty() && global_step % VAL_INTERVAL == 0 {
                let val = validation_elbo(&mut model, data, val_idx, cfg, lambda_al, c_al)?;
                if val > best_val {
                    best_val = val;
                }
                let improved = if inner_best.is_finite() {
                    val > inner_best + PLATEAU_REL * inner_best.abs()
                } else {
                    true
                };
                if improved {
                    inner_best = val;
                    last_improve = global_step;
                } else if global_step - last_improve >= PLATEAU_STEPS {
                    plateau = true;
                }
                val_cell = format!("{val}");
            }
            if let Some(w) = log.as_deref_mut() {
                let t = &out.terms;
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    global_step,
                    outer,
                    epoch,
                    t.elbo,
                    t.recon,
                    t.latent,
                    t.z_entropy,
                    t.graph_entropy,
                    t.sparsity,
                    t.factor_kl,
                    t.acyc_h,
                    t.acyc_penalty,
                    c_al,
                    lambda_al,
                    val_cell,
                )
                .map_err(log_err)?;
            }
            if plateau {
                break;
            }
        }

        // Constraint schedule: tighten the penalty when h stalls, otherwise
        // fold progress into the multiplier.
        let h = graph_h(&model)?;
        if h > 0.9 * h_prev {
            c_al *= 10.0;
        } else {
            lambda_al += c_al * h;
        }
        h_prev = h;
        outer_done = outer + 1;
    }

    Ok(RunState {
        model,
        adam,
        lambda_al,
        c_al,
        h_prev,
        outer_step: outer_done,
        global_step,
        epoch,
        best_val,
        rng,
    })
}
