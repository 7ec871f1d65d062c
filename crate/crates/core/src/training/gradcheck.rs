//! Finite-difference check of the full training objective on a toy problem.

use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{Forward, Mode, Model, ModelConfig, StyleSampling};
use crate::numerics::{Graph, NumericsError, Tensor};
use crate::objectives::{total_loss, LossNodes, PairBatch};
use crate::synthdata::{stream_rng, SpikeSequence};

use super::{TrainConfig, TrainError, Trainer, WindowSampler};

/// Denominator floor of the relative error. Biases feeding a batchnorm
/// have an exact zero gradient, and difference quotients of a loss near 1
/// carry rounding noise near 1e-10.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Standard deviation of the jitter added to the initial parameters, so
/// the check does not sit on the kinks of ReLU or of cosine at a zero row.
const JITTER: f64 = 0.1;

fn default_eps() -> f64 {
    1e-5
}
fn default_tolerance() -> f64 {
    1e-4
}

/// Toy problem for the check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSetup {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub n_negatives: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        let mut model = ModelConfig::new(4, 4, 3, 1);
        model.state_dim = Some(4);
        model.prior_l2 = 0.5;
        Self { model, batch_size: 2, n_negatives: 2, seed: 0, eps: default_eps(), tolerance: default_tolerance() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveGradCheck {
    /// Worst error of each loss term over all parameters.
    pub terms: Vec<GroupError>,
    /// Worst error of the total loss per parameter group.
    pub params: Vec<GroupError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl ObjectiveGradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

const TERMS: [&str; 6] = ["total", "recons", "regular", "contrast", "swap_recons", "prior_l2"];

fn term_nodes(n: &LossNodes) -> [crate::numerics::NodeId; 6] {
    [n.total, n.recons, n.regular, n.contrast, n.swap_recons, n.prior_l2]
}

/// Random counts, batch and fixed style noise for `setup`.
fn toy_problem(setup: &GradCheckSetup) -> Result<(Model, PairBatch, Vec<Tensor>), TrainError> {
    let mc = &setup.model;
    let mut model = Model::new(mc.clone(), setup.seed)?;
    let mut rng = stream_rng(setup.seed, 2);
    for p in model.params_mut().values_mut() {
        for v in p.data_mut() {
            *v += JITTER * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let poisson = Poisson::new(1.5).expect("positive rate");
    let len = mc.seq_len + mc.max_offset + 2;
    let trials: Vec<SpikeSequence> = (0..setup.batch_size.max(2) + 2)
        .map(|k| SpikeSequence {
            n_neurons: mc.n_neurons,
            counts: (0..len * mc.n_neurons).map(|_| poisson.sample(&mut rng) as u32).collect(),
            label: Some(k as u32),
            latents: Vec::new(),
            latent_dim: 0,
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: setup.batch_size,
        n_negatives: Some(setup.n_negatives),
        seed: setup.seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::from_model(model.clone(), cfg)?;
    let sampler = WindowSampler::new(&trials, mc.seq_len)?;
    let batch = trainer.sample_batch(&trials, &sampler)?;
    let rows = 2 * setup.batch_size + batch.negatives.first().map_or(0, Tensor::rows);
    let noise = (0..mc.seq_len)
        .map(|_| {
            let data =
                (0..rows * mc.style_dim()).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            Tensor::matrix(rows, mc.style_dim(), data).expect("rows × style")
        })
        .collect();
    Ok((model, batch, noise))
}

/// Compares reverse-mode gradients of every loss term against central
/// differences over all model parameters. `corrupt` scales the analytic
/// gradient of the first parameter by `1 + corrupt`, for exercising the
/// failure path.
pub fn gradcheck_objective(setup: &GradCheckSetup, corrupt: Option<f64>) -> Result<ObjectiveGradCheck, TrainError> {
    if !(setup.eps > 0.0 && setup.eps.is_finite()) {
        return Err(TrainError::Config(format!("gradcheck step must be positive, got {}", setup.eps)));
    }
    setup.model.validate()?;
    let (model, batch, noise) = toy_problem(setup)?;
    let loss_cfg = TrainConfig::default().loss_config(model.config());
    let params: Vec<Tensor> = model.params().values().to_vec();

    let values = |p: &[Tensor]| -> Result<[f64; 6], TrainError> {
        let mut g = Graph::new();
        let ids = p.iter().map(|t| g.input(t.clone())).collect();
        let mut fwd = Forward::with_params(&model, &mut g, ids, Mode::Train);
        let nodes = total_loss(&mut fwd, &batch, StyleSampling::Fixed(&noise), &loss_cfg)?;
        Ok(term_nodes(&nodes).map(|n| g.value(n).data()[0]))
    };
    let analytic = |term: usize| -> Result<Vec<Tensor>, TrainError> {
        let mut g = Graph::new();
        let ids: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
        let mut fwd = Forward::with_params(&model, &mut g, ids.clone(), Mode::Train);
        let nodes = total_loss(&mut fwd, &batch, StyleSampling::Fixed(&noise), &loss_cfg)?;
        g.backward(term_nodes(&nodes)[term]).map_err(|e| TrainError::Objective(e.into()))?;
        Ok(ids
            .iter()
            .zip(&params)
            .map(|(&i, t)| g.grad(i).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    };

    let mut grads: Vec<Vec<Tensor>> = (0..TERMS.len()).map(analytic).collect::<Result<_, _>>()?;
    if let Some(c) = corrupt {
        for g in &mut grads {
            for v in g[0].data_mut() {
                *v *= 1.0 + c;
            }
        }
    }
    let mut term_err = [0.0f64; 6];
    let mut param_err = vec![0.0f64; params.len()];
    let mut probe = params.clone();
    for pi in 0..params.len() {
        for c in 0..params[pi].len() {
            let orig = params[pi].data()[c];
            probe[pi].data_mut()[c] = orig + setup.eps;
            let up = values(&probe)?;
            probe[pi].data_mut()[c] = orig - setup.eps;
            let down = values(&probe)?;
            probe[pi].data_mut()[c] = orig;
            for k in 0..TERMS.len() {
                let numeric = (up[k] - down[k]) / (2.0 * setup.eps);
                let a = grads[k][pi].data()[c];
                if !a.is_finite() || !numeric.is_finite() {
                    return Err(TrainError::Objective(
                        NumericsError::NonFiniteGradient { param: pi, coord: c, analytic: a, numeric }.into(),
                    ));
                }
                let e = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
                term_err[k] = term_err[k].max(e);
                if k == 0 {
                    param_err[pi] = param_err[pi].max(e);
                }
            }
        }
    }
    let max_rel_error = term_err.iter().copied().fold(0.0, f64::max);
    Ok(ObjectiveGradCheck {
        terms: TERMS.iter().zip(term_err).map(|(n, e)| GroupError { name: n.to_string(), max_rel_error: e }).collect(),
        params: (0..params.len())
            .map(|i| GroupError { name: model.params().name(i).to_string(), max_rel_error: param_err[i] })
            .collect(),
        max_rel_error,
        tolerance: setup.tolerance,
    })
}
