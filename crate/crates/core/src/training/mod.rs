//! Mini-batch training with Adam.

mod adam;
mod gradcheck;
mod sampling;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Forward, Mode, Model, ModelConfig, ModelError, StyleSampling};
use crate::numerics::{Graph, NumericsError, Tensor};
use crate::objectives::{total_loss, ContrastMode, LossBreakdown, LossConfig, ObjectiveError, PairBatch};
use crate::synthdata::SpikeSequence;

pub use adam::Adam;
pub use gradcheck::{gradcheck_objective, GradCheckSetup, GroupError, ObjectiveGradCheck};
pub use sampling::{sample_negatives, sample_positive, stack_windows, Window, WindowSampler};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite loss at iteration {iteration} in term `{term}`")]
    NonFiniteLoss { iteration: usize, term: String },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("checkpoint callback failed: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

impl TrainError {
    /// Whether the failure is numerical (non-finite values) rather than a
    /// configuration or data problem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::NonFiniteGradient { .. }
                | TrainError::Model(ModelError::Step { .. })
                | TrainError::Model(ModelError::Numerics(_))
        )
    }
}

fn default_iterations() -> usize {
    5000
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_log_interval() -> usize {
    100
}
fn default_true() -> bool {
    true
}

/// Optimization schedule, sampling sizes and objective ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Negatives per anchor: the other anchors first, then fresh windows.
    /// Defaults to `batch_size`.
    #[serde(default)]
    pub n_negatives: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    /// Zero disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub contrast: ContrastMode,
    #[serde(default = "default_true")]
    pub swap: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            batch_size: default_batch(),
            n_negatives: None,
            learning_rate: default_lr(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            seed: 0,
            log_interval: default_log_interval(),
            checkpoint_interval: 0,
            contrast: ContrastMode::Full,
            swap: true,
        }
    }
}

impl TrainConfig {
    pub fn negatives(&self) -> usize {
        self.n_negatives.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(TrainError::Config("log_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self, model: &ModelConfig) -> LossConfig {
        LossConfig { contrast: self.contrast, swap: self.swap, ..LossConfig::from_model(model) }
    }
}

/// One loss-log record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Model, optimizer and sampling state.
pub struct Trainer {
    pub model: Model,
    cfg: TrainConfig,
    loss: LossConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
}

const SAMPLING_STREAM: u64 = 1;

impl Trainer {
    /// Fresh model initialized from `train.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self, TrainError> {
        let model = Model::new(model_cfg, cfg.seed)?;
        Self::from_model(model, cfg)
    }

    pub fn from_model(model: Model, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let adam = Adam::new(model.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let loss = cfg.loss_config(model.config());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLING_STREAM);
        Ok(Self { model, cfg, loss, adam, rng, iteration: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    /// Anchors, their positives and fresh negatives for one step.
    pub fn sample_batch(&mut self, trials: &[SpikeSequence], sampler: &WindowSampler) -> Result<PairBatch, TrainError> {
        let mc = self.model.config();
        let (t_seq, max_offset) = (mc.seq_len, mc.max_offset);
        let b = self.cfg.batch_size;
        let anchors: Vec<Window> = (0..b).map(|_| sampler.sample(&mut self.rng)).collect();
        let mut positives = Vec::with_capacity(b);
        for w in &anchors {
            let d = sample_positive(trials[w.trial].len(), w.start, t_seq, max_offset, &mut self.rng)?;
            positives.push(Window { trial: w.trial, start: (w.start as isize + d) as usize });
        }
        let (fresh, negative_index) = if self.loss.contrast == ContrastMode::Full {
            let k = self.cfg.negatives();
            let others = k.min(b - 1);
            let fresh = sample_negatives(sampler, k - others, &mut self.rng);
            let index = (0..b).map(|i| (1..=others).map(|d| (i + d) % b).chain(b..b + fresh.len()).collect()).collect();
            (fresh, index)
        } else {
            (Vec::new(), vec![Vec::new(); b])
        };
        Ok(PairBatch {
            anchor: stack_windows(trials, &anchors, t_seq),
            positive: stack_windows(trials, &positives, t_seq),
            negatives: if fresh.is_empty() { Vec::new() } else { stack_windows(trials, &fresh, t_seq) },
            negative_index,
        })
    }

    /// One optimizer step on `batch`. Style noise is drawn from the
    /// trainer's generator unless `noise` fixes it.
    pub fn step(&mut self, batch: &PairBatch, noise: Option<&[Tensor]>) -> Result<LossBreakdown, TrainError> {
        let iteration = self.iteration + 1;
        let mut g = Graph::new();
        let mut fwd = Forward::new(&self.model, &mut g, Mode::Train);
        let sampling = match noise {
            Some(n) => StyleSampling::Fixed(n),
            None => StyleSampling::Rng(&mut self.rng),
        };
        let nodes = total_loss(&mut fwd, batch, sampling, &self.loss).map_err(|e| name_failure(e, iteration))?;
        let params = fwd.param_nodes().to_vec();
        let updates = std::mem::take(&mut fwd.bn_updates);
        let values = nodes.values(&g);
        g.backward(nodes.total).map_err(|e| TrainError::Objective(e.into()))?;
        let grads: Vec<Tensor> = params
            .iter()
            .zip(self.model.params().values())
            .map(|(&p, t)| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        self.adam.step(self.model.params_mut(), &grads)?;
        self.model.apply_bn_updates(&updates);
        self.iteration = iteration;
        Ok(values)
    }
}

fn name_failure(e: ObjectiveError, iteration: usize) -> TrainError {
    match e {
        ObjectiveError::Term { term, source: NumericsError::NonFinite { .. } } => {
            TrainError::NonFiniteLoss { iteration, term: term.to_string() }
        }
        ObjectiveError::NonPositiveRate { .. } => TrainError::NonFiniteLoss { iteration, term: "recons".into() },
        ObjectiveError::Model(ModelError::Step { source: NumericsError::NonFinite { .. }, .. })
        | ObjectiveError::Numerics(NumericsError::NonFinite { .. }) => {
            TrainError::NonFiniteLoss { iteration, term: "forward".into() }
        }
        e => TrainError::Objective(e),
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRecord>,
}

/// Keeps trials with at least one admissible anchor/positive pair.
pub fn usable_trials(trials: &[SpikeSequence], t_seq: usize) -> Vec<SpikeSequence> {
    let need = if t_seq > 1 { t_seq + 1 } else { 1 };
    let mut out = Vec::with_capacity(trials.len());
    for (i, s) in trials.iter().enumerate() {
        if s.len() >= need {
            out.push(s.clone());
        } else {
            warn!("trial {i} has {} bins, fewer than the {need} needed; excluded", s.len());
        }
    }
    out
}

/// Trains a fresh model on `trials`.
///
/// `on_checkpoint(iteration, model)` runs every `checkpoint_interval`
/// iterations. Loss records are kept at iteration 1, every
/// `log_interval`, and the last iteration.
pub fn train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    trials: &[SpikeSequence],
    mut on_checkpoint: impl FnMut(usize, &Model) -> Result<(), String>,
) -> Result<TrainOutcome, TrainError> {
    let n = model_cfg.n_neurons;
    if let Some(s) = trials.iter().find(|s| s.n_neurons != n) {
        return Err(TrainError::Data(format!("data has {} neurons, model expects {n}", s.n_neurons)));
    }
    let trials = usable_trials(trials, model_cfg.seq_len);
    let iterations = cfg.iterations;
    let (log_interval, ckpt) = (cfg.log_interval, cfg.checkpoint_interval);
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let mut log = Vec::new();
    if iterations == 0 {
        return Ok(TrainOutcome { model: trainer.model, log });
    }
    let sampler = WindowSampler::new(&trials, trainer.model.config().seq_len)?;
    for it in 1..=iterations {
        let batch = trainer.sample_batch(&trials, &sampler)?;
        let loss = trainer.step(&batch, None)?;
        if it == 1 || it % log_interval == 0 || it == iterations {
            info!(
                "iter {it}: total {:.5} recons {:.5} regular {:.5} contrast {:.5} swap {:.5} prior_l2 {:.5}",
                loss.total, loss.recons, loss.regular, loss.contrast, loss.swap_recons, loss.prior_l2
            );
            log.push(LossRecord { iteration: it, loss });
        }
        if ckpt > 0 && it % ckpt == 0 {
            on_checkpoint(it, &trainer.model).map_err(TrainError::Checkpoint)?;
        }
    }
    Ok(TrainOutcome { model: trainer.model, log })
}

#[cfg(test)]
mod tests;
