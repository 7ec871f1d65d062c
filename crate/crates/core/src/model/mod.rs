//! The split-latent sequential VAE.
//!
//! One step of the chronological recursion, with `x_t` the spike counts of
//! bin `t` and `h` the two recurrent state factors:
//!
//! ```text
//! feat      = block(x_t)                                 N → N
//! z_content = linear(block([feat, h_content]))           → M/2, deterministic
//! posterior = linear(block([feat, h_style]))             → (mean, log var)
//! prior     = linear(h_style)                            → (mean, log var)
//! z_style   = mean + exp(log var / 2) · ε
//! rates     = softplus(linear(block(block([z_content, z_style, h_style]))))
//! h_content = cell(feat, h_content)
//! h_style   = cell([feat, z_content, z_style], h_style)
//! ```
//!
//! `block` is linear → batch normalization → ReLU. The decoder reads the
//! style state from *before* the update, as does the prior.

mod config;
mod layers;
mod params;

use std::io::{Read, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{BatchStats, Graph, NodeId, NumericsError, Tensor};

pub use config::{CellKind, ModelConfig, PriorKind};
pub use params::{ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub use layers::CellState;
use layers::{bn_mode, BatchNorm, Block, Cell, Linear, BN_MOMENTUM};

/// Bounds applied to every predicted log-variance.
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical failure at step {step}: {source}")]
    Step { step: usize, source: NumericsError },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Diagonal Gaussian given by its mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianParams {
    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_variance: vec![0.0; dim] }
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|v| v.exp()).collect()
    }
}

/// `mean + exp(½·log var)·noise`, with the log-variance clamped to the model bounds.
pub fn reparameterize(g: &GaussianParams, noise: &[f64]) -> Result<Vec<f64>, ModelError> {
    if noise.len() != g.mean.len() || g.log_variance.len() != g.mean.len() {
        return Err(ModelError::Shape(format!("noise of length {} for a {}-dim Gaussian", noise.len(), g.mean.len())));
    }
    Ok(g.mean
        .iter()
        .zip(&g.log_variance)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp() * e)
        .collect())
}

/// Whether batch normalization uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Source of the style latent at each step.
pub enum StyleSampling<'a> {
    /// Use the posterior mean (deterministic evaluation).
    Mean,
    /// Draw fresh standard-normal noise.
    Rng(&'a mut dyn RngCore),
    /// Pre-drawn noise, one `rows × style_dim` tensor per step.
    Fixed(&'a [Tensor]),
}

/// Graph handles produced by one step of the recursion.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    pub z_content: NodeId,
    pub z_style: NodeId,
    pub posterior_mean: NodeId,
    pub posterior_logvar: NodeId,
    pub prior_mean: NodeId,
    pub prior_logvar: NodeId,
    pub rates: NodeId,
    /// Style state that conditioned this step (before its update).
    pub h_style_prev: NodeId,
    pub h_content: NodeId,
    pub h_style: NodeId,
}

/// Per-step latent quantities for a batch of sequences (one row each).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub z_content: Tensor,
    pub z_style: Tensor,
    pub posterior_mean: Tensor,
    pub posterior_logvar: Tensor,
    pub prior_mean: Tensor,
    pub prior_logvar: Tensor,
    pub rates: Tensor,
    pub h_content: Tensor,
    pub h_style: Tensor,
}

impl LatentTable {
    pub fn rows(&self) -> usize {
        self.z_content.rows()
    }

    pub fn posterior(&self, row: usize) -> GaussianParams {
        GaussianParams {
            mean: self.posterior_mean.row_slice(row).to_vec(),
            log_variance: self.posterior_logvar.row_slice(row).to_vec(),
        }
    }

    pub fn prior(&self, row: usize) -> GaussianParams {
        GaussianParams {
            mean: self.prior_mean.row_slice(row).to_vec(),
            log_variance: self.prior_logvar.row_slice(row).to_vec(),
        }
    }

    fn gather(g: &Graph, s: &StepNodes) -> Self {
        Self {
            z_content: g.value(s.z_content).clone(),
            z_style: g.value(s.z_style).clone(),
            posterior_mean: g.value(s.posterior_mean).clone(),
            posterior_logvar: g.value(s.posterior_logvar).clone(),
            prior_mean: g.value(s.prior_mean).clone(),
            prior_logvar: g.value(s.prior_logvar).clone(),
            rates: g.value(s.rates).clone(),
            h_content: g.value(s.h_content).clone(),
            h_style: g.value(s.h_style).clone(),
        }
    }

    /// Stacks tables row-wise (same widths).
    pub fn concat_rows(parts: &[LatentTable]) -> Result<Self, NumericsError> {
        fn cat(parts: &[LatentTable], f: impl Fn(&LatentTable) -> &Tensor) -> Result<Tensor, NumericsError> {
            let cols = parts.first().map_or(0, |p| f(p).cols());
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(f(p).data());
            }
            let rows = data.len().checked_div(cols).unwrap_or(0);
            Tensor::matrix(rows, cols, data)
        }
        Ok(Self {
            z_content: cat(parts, |p| &p.z_content)?,
            z_style: cat(parts, |p| &p.z_style)?,
            posterior_mean: cat(parts, |p| &p.posterior_mean)?,
            posterior_logvar: cat(parts, |p| &p.posterior_logvar)?,
            prior_mean: cat(parts, |p| &p.prior_mean)?,
            prior_logvar: cat(parts, |p| &p.prior_logvar)?,
            rates: cat(parts, |p| &p.rates)?,
            h_content: cat(parts, |p| &p.h_content)?,
            h_style: cat(parts, |p| &p.h_style)?,
        })
    }
}

/// Latents for every step of a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub steps: Vec<LatentTable>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Batch statistics recorded by a train-mode pass, for running averages.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    running_mean: usize,
    running_var: usize,
    stats: BatchStats,
}

#[derive(Clone, Debug)]
struct Architecture {
    embed: Block,
    content_block: Block,
    content_out: Linear,
    style_block: Block,
    style_out: Linear,
    prior: Linear,
    dec1: Block,
    dec2: Block,
    dec_out: Linear,
    content_cell: Cell,
    style_cell: Cell,
}

impl Architecture {
    fn build(cfg: &ModelConfig, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (n, m, mc, ms, h) = (cfg.n_neurons, cfg.latent_dim, cfg.content_dim(), cfg.style_dim(), cfg.hidden_dim());
        Self {
            embed: Block::new(params, buffers, "embed", n, n, rng),
            content_block: Block::new(params, buffers, "content.block", n + h, m, rng),
            content_out: Linear::new(params, "content.out", m, mc, rng),
            style_block: Block::new(params, buffers, "style.block", n + h, m, rng),
            style_out: Linear::new(params, "style.out", m, 2 * ms, rng),
            prior: Linear::new(params, "prior", h, 2 * ms, rng),
            dec1: Block::new(params, buffers, "decoder.block1", mc + ms + h, m, rng),
            dec2: Block::new(params, buffers, "decoder.block2", m, m, rng),
            dec_out: Linear::new(params, "decoder.out", m, n, rng),
            content_cell: Cell::new(params, "content.cell", cfg.cell, n, h, rng),
            style_cell: Cell::new(params, "style.cell", cfg.cell, n + mc + ms, h, rng),
        }
    }
}

/// Model parameters, batch-norm running statistics and configuration.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    buffers: ParamStore,
    arch: Architecture,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.buffers == other.buffers
    }
}

impl Model {
    /// Freshly initialized model; weights are drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut buffers = ParamStore::default();
        let arch = Architecture::build(&config, &mut params, &mut buffers, &mut rng);
        Ok(Self { config, params, buffers, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    /// Sets every trainable parameter to zero (used by hand-checkable examples).
    pub fn zero_params(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let i = self.params.index_of(name).ok_or_else(|| ModelError::Shape(format!("no parameter named {name}")))?;
        if self.params.get(i).shape() != value.shape() {
            return Err(ModelError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                self.params.get(i).shape(),
                value.shape()
            )));
        }
        *self.params.get_mut(i) = value;
        Ok(())
    }

    /// Folds recorded batch statistics into the running averages, in order.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let n = u.stats.batch as f64;
            let unbias = if u.stats.batch > 1 { n / (n - 1.0) } else { 1.0 };
            let rm = self.buffers.get_mut(u.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.buffers.get_mut(u.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&u.stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    // ── Checkpoints ──────────────────────────────────────────────────

    pub fn save<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        params::write_checkpoint(w, &self.config, &self.params, &self.buffers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.save(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    /// Reads a checkpoint and checks it against the architecture its config implies.
    pub fn load<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let (config, params, buffers) = params::read_checkpoint(r)?;
        let mut fresh = Self::new(config, 0)?;
        for (store, loaded, what) in [(&fresh.params, &params, "parameter"), (&fresh.buffers, &buffers, "buffer")] {
            if store.names() != loaded.names() {
                return Err(ModelError::Checkpoint(format!("{what} names do not match the configured architecture")));
            }
            for i in 0..store.len() {
                if store.get(i).shape() != loaded.get(i).shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "{what} {} has shape {:?}, expected {:?}",
                        store.name(i),
                        loaded.get(i).shape(),
                        store.get(i).shape()
                    )));
                }
            }
        }
        fresh.params = params;
        fresh.buffers = buffers;
        Ok(fresh)
    }

    // ── Evaluation helpers ───────────────────────────────────────────

    /// Unrolls a batch of equal-length sequences in one graph.
    ///
    /// `x` holds one `rows × n_neurons` tensor of counts per time step.
    pub fn unroll(
        &self,
        x: &[Tensor],
        mode: Mode,
        mut sampling: StyleSampling<'_>,
    ) -> Result<LatentTrajectory, ModelError> {
        let mut g = Graph::new();
        let mut fwd = Forward::new(self, &mut g, mode);
        fwd.track_running_stats = false;
        let inputs: Vec<NodeId> = x.iter().map(|t| fwd.graph.input(t.clone())).collect();
        let steps = fwd.unroll(&inputs, &mut sampling)?;
        Ok(LatentTrajectory { steps: steps.iter().map(|s| LatentTable::gather(&g, s)).collect() })
    }

    /// Deterministic evaluation of each row's final step, one small graph per step.
    ///
    /// `x` is one `rows × n_neurons` tensor per step; every row is an
    /// independent sequence starting from zero state.
    pub fn encode_final(&self, x: &[Tensor]) -> Result<LatentTable, ModelError> {
        self.encode_all(x).map(|mut v| v.pop().expect("at least one step"))
    }

    /// Like [`Model::encode_final`] but keeps every step.
    pub fn encode_all(&self, x: &[Tensor]) -> Result<Vec<LatentTable>, ModelError> {
        if x.is_empty() {
            return Err(ModelError::Shape("empty sequence".into()));
        }
        let rows = x[0].rows();
        let h = self.config.hidden_dim();
        let lstm = self.config.cell == CellKind::Lstm;
        let mut carry = [
            Tensor::zeros(&[rows, h]),
            Tensor::zeros(&[rows, h]),
            Tensor::zeros(&[rows, h]),
            Tensor::zeros(&[rows, h]),
        ];
        let mut out = Vec::with_capacity(x.len());
        for (t, xt) in x.iter().enumerate() {
            let mut g = Graph::new();
            let mut fwd = Forward::new(self, &mut g, Mode::Eval);
            let xi = fwd.graph.input(xt.clone());
            let [hc, cc, hs, cs] = carry.clone().map(|v| fwd.graph.input(v));
            let state = State {
                content: CellState { h: hc, c: lstm.then_some(cc) },
                style: CellState { h: hs, c: lstm.then_some(cs) },
            };
            let (step, next) = fwd.step(xi, state, None).map_err(|source| ModelError::Step { step: t, source })?;
            carry = [
                g.value(next.content.h).clone(),
                next.content.c.map_or_else(|| Tensor::zeros(&[rows, h]), |c| g.value(c).clone()),
                g.value(next.style.h).clone(),
                next.style.c.map_or_else(|| Tensor::zeros(&[rows, h]), |c| g.value(c).clone()),
            ];
            out.push(LatentTable::gather(&g, &step));
        }
        Ok(out)
    }

    /// Latents at every bin of a recording, each computed from a window of
    /// the `order` preceding bins plus the bin itself, starting from zero
    /// state. Bins with fewer than `order` predecessors use the available
    /// prefix. `counts` is `T × n_neurons`.
    pub fn infer_windowed_latents(&self, counts: &Tensor, order: usize) -> Result<LatentTable, ModelError> {
        const CHUNK: usize = 512;
        let (t_len, n) = (counts.rows(), counts.cols());
        if t_len == 0 || counts.is_empty() {
            return Err(ModelError::Shape("empty recording".into()));
        }
        if n != self.config.n_neurons {
            return Err(ModelError::Shape(format!(
                "recording has {} neurons, model expects {}",
                n, self.config.n_neurons
            )));
        }
        let bin = |t: usize| counts.row_slice(t);
        let mut parts = Vec::new();
        // Prefix windows [0, t] for t < order are the steps of one unroll.
        let prefix = order.min(t_len);
        if prefix > 0 {
            let xs: Vec<Tensor> = (0..prefix).map(|t| Tensor::row(bin(t))).collect();
            parts.extend(self.encode_all(&xs)?);
        }
        // Full windows [t - order, t] for t >= order, batched across t.
        let mut start = prefix;
        while start < t_len {
            let end = (start + CHUNK).min(t_len);
            let rows = end - start;
            let xs: Vec<Tensor> = (0..=order)
                .map(|k| {
                    let mut data = Vec::with_capacity(rows * n);
                    for t in start..end {
                        data.extend_from_slice(bin(t - order + k));
                    }
                    Tensor::matrix(rows, n, data).expect("rows × n")
                })
                .collect();
            parts.push(self.encode_final(&xs)?);
            start = end;
        }
        Ok(LatentTable::concat_rows(&parts)?)
    }
}

/// Recurrent state for both factors.
#[derive(Clone, Copy, Debug)]
pub struct State {
    pub content: CellState,
    pub style: CellState,
}

/// One forward pass of the model over a graph.
///
/// Train-mode batch normalization records its batch statistics in
/// `bn_updates`; the caller folds them into the model with
/// [`Model::apply_bn_updates`] after the optimizer step.
pub struct Forward<'m, 'g> {
    model: &'m Model,
    pub graph: &'g mut Graph,
    params: Vec<NodeId>,
    mode: Mode,
    pub track_running_stats: bool,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'m, 'g> Forward<'m, 'g> {
    /// Binds every parameter as a differentiable leaf of `graph`.
    pub fn new(model: &'m Model, graph: &'g mut Graph, mode: Mode) -> Self {
        let params = model.params.values().iter().map(|t| graph.param(t.clone())).collect();
        Self::with_params(model, graph, params, mode)
    }

    /// Uses caller-supplied parameter nodes, in `ParamStore` order.
    pub fn with_params(model: &'m Model, graph: &'g mut Graph, params: Vec<NodeId>, mode: Mode) -> Self {
        Self { model, graph, params, mode, track_running_stats: true, bn_updates: Vec::new() }
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.params
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    fn bn(&mut self, bn: &BatchNorm, x: NodeId) -> Result<NodeId, NumericsError> {
        let train = self.mode == Mode::Train;
        let mode = bn_mode(bn, &self.model.buffers, train);
        let (y, stats) = self.graph.batchnorm(x, self.params[bn.gamma], self.params[bn.beta], mode)?;
        if let (Some(stats), true) = (stats, self.track_running_stats) {
            self.bn_updates.push(BnUpdate { running_mean: bn.running_mean, running_var: bn.running_var, stats });
        }
        Ok(y)
    }

    fn block(&mut self, b: &Block, x: NodeId) -> Result<NodeId, NumericsError> {
        let y = b.linear.forward(self.graph, &self.params, x)?;
        let y = self.bn(&b.bn, y)?;
        self.graph.relu(y)
    }

    fn split_gaussian(&mut self, packed: NodeId) -> Result<(NodeId, NodeId), NumericsError> {
        let ms = self.model.config.style_dim();
        let mean = self.graph.slice_cols(packed, 0, ms)?;
        let lv = self.graph.slice_cols(packed, ms, ms)?;
        let lv = self.graph.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mean, lv))
    }

    /// Input embedding of one bin of counts (`rows × n_neurons`).
    pub fn embed(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.model.config.n_neurons;
        if self.graph.value(x).cols() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "embed_input",
                detail: format!("expected {} neurons, got {}", n, self.graph.value(x).cols()),
            });
        }
        let arch = &self.model.arch;
        self.block(&arch.embed, x)
    }

    /// Deterministic content latent from the embedding and content state.
    pub fn encode_content(&mut self, feat: NodeId, h_content: NodeId) -> Result<NodeId, NumericsError> {
        let arch = &self.model.arch;
        let x = self.graph.concat_cols(&[feat, h_content])?;
        let y = self.block(&arch.content_block, x)?;
        arch.content_out.forward(self.graph, &self.params, y)
    }

    /// Approximate posterior over the style latent: `(mean, log var)`.
    pub fn encode_style_posterior(&mut self, feat: NodeId, h_style: NodeId) -> Result<(NodeId, NodeId), NumericsError> {
        let arch = &self.model.arch;
        let x = self.graph.concat_cols(&[feat, h_style])?;
        let y = self.block(&arch.style_block, x)?;
        let packed = arch.style_out.forward(self.graph, &self.params, y)?;
        self.split_gaussian(packed)
    }

    /// Prior over the style latent given the previous style state.
    pub fn compute_prior(&mut self, h_style: NodeId) -> Result<(NodeId, NodeId), NumericsError> {
        match self.model.config.prior {
            PriorKind::StandardNormal => {
                let rows = self.graph.value(h_style).rows();
                let ms = self.model.config.style_dim();
                let mean = self.graph.input(Tensor::zeros(&[rows, ms]));
                let lv = self.graph.input(Tensor::zeros(&[rows, ms]));
                Ok((mean, lv))
            }
            PriorKind::TimeDependent => {
                let arch = &self.model.arch;
                let packed = arch.prior.forward(self.graph, &self.params, h_style)?;
                self.split_gaussian(packed)
            }
        }
    }

    pub fn reparameterize(&mut self, mean: NodeId, logvar: NodeId, noise: NodeId) -> Result<NodeId, NumericsError> {
        let half = self.graph.scale(logvar, 0.5)?;
        let std = self.graph.exp(half)?;
        let e = self.graph.mul(std, noise)?;
        self.graph.add(mean, e)
    }

    /// Poisson rates from both latents and the previous style state.
    pub fn decode(
        &mut self,
        z_content: NodeId,
        z_style: NodeId,
        h_style_prev: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let arch = &self.model.arch;
        let x = self.graph.concat_cols(&[z_content, z_style, h_style_prev])?;
        let y = self.block(&arch.dec1, x)?;
        let y = self.block(&arch.dec2, y)?;
        let y = arch.dec_out.forward(self.graph, &self.params, y)?;
        self.graph.softplus(y)
    }

    pub fn update_content_state(&mut self, feat: NodeId, state: CellState) -> Result<CellState, NumericsError> {
        let arch = &self.model.arch;
        arch.content_cell.step(self.graph, &self.params, feat, state)
    }

    pub fn update_style_state(
        &mut self,
        feat: NodeId,
        z_content: NodeId,
        z_style: NodeId,
        state: CellState,
    ) -> Result<CellState, NumericsError> {
        let arch = &self.model.arch;
        let x = self.graph.concat_cols(&[feat, z_content, z_style])?;
        arch.style_cell.step(self.graph, &self.params, x, state)
    }

    /// Zero initial state for `rows` sequences.
    pub fn initial_state(&mut self, rows: usize) -> State {
        let h = self.model.config.hidden_dim();
        let lstm = self.model.config.cell == CellKind::Lstm;
        let mut zero = || self.graph.input(Tensor::zeros(&[rows, h]));
        let content = CellState { h: zero(), c: None };
        let style = CellState { h: zero(), c: None };
        let (cc, cs) = if lstm { (Some(zero()), Some(zero())) } else { (None, None) };
        State { content: CellState { c: cc, ..content }, style: CellState { c: cs, ..style } }
    }

    /// One step of the recursion. `noise = None` uses the posterior mean.
    pub fn step(
        &mut self,
        x: NodeId,
        state: State,
        noise: Option<NodeId>,
    ) -> Result<(StepNodes, State), NumericsError> {
        let feat = self.embed(x)?;
        let z_content = self.encode_content(feat, state.content.h)?;
        let (post_mean, post_lv) = self.encode_style_posterior(feat, state.style.h)?;
        let (prior_mean, prior_lv) = self.compute_prior(state.style.h)?;
        let z_style = match noise {
            Some(e) => self.reparameterize(post_mean, post_lv, e)?,
            None => post_mean,
        };
        let rates = self.decode(z_content, z_style, state.style.h)?;
        let content = self.update_content_state(feat, state.content)?;
        let style = self.update_style_state(feat, z_content, z_style, state.style)?;
        let nodes = StepNodes {
            z_content,
            z_style,
            posterior_mean: post_mean,
            posterior_logvar: post_lv,
            prior_mean,
            prior_logvar: prior_lv,
            rates,
            h_style_prev: state.style.h,
            h_content: content.h,
            h_style: style.h,
        };
        Ok((nodes, State { content, style }))
    }

    /// Unrolls `xs` (one `rows × n_neurons` node per step) from zero state.
    pub fn unroll(&mut self, xs: &[NodeId], sampling: &mut StyleSampling<'_>) -> Result<Vec<StepNodes>, ModelError> {
        let Some(&first) = xs.first() else {
            return Err(ModelError::Shape("cannot unroll an empty sequence".into()));
        };
        let rows = self.graph.value(first).rows();
        let ms = self.model.config.style_dim();
        if let StyleSampling::Fixed(noise) = sampling {
            if noise.len() < xs.len() {
                return Err(ModelError::Shape(format!("{} noise steps for {} inputs", noise.len(), xs.len())));
            }
        }
        let mut state = self.initial_state(rows);
        let mut out = Vec::with_capacity(xs.len());
        for (t, &x) in xs.iter().enumerate() {
            let noise = match sampling {
                StyleSampling::Mean => None,
                StyleSampling::Rng(rng) => {
                    let data = (0..rows * ms).map(|_| StandardNormal.sample(&mut **rng)).collect();
                    Some(self.graph.input(Tensor::matrix(rows, ms, data)?))
                }
                StyleSampling::Fixed(noise) => {
                    let e = &noise[t];
                    if e.rows() != rows || e.cols() != ms {
                        return Err(ModelError::Shape(format!("noise at step {t} has shape {:?}", e.shape())));
                    }
                    Some(self.graph.input(e.clone()))
                }
            };
            let (nodes, next) = self.step(x, state, noise).map_err(|source| ModelError::Step { step: t, source })?;
            out.push(nodes);
            state = next;
        }
        Ok(out)
    }
}
