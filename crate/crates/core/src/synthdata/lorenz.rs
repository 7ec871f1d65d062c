//! Lorenz-driven Poisson populations.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{poisson_sample, split_sizes, stream_rng, DataError, DatasetBundle, DatasetSpec, Manifest, SpikeSequence};

/// How latent coordinates are standardized before the readout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// Zero mean, unit variance within each condition's trajectory.
    #[default]
    PerCondition,
    /// Zero mean, unit variance over all conditions pooled.
    Global,
}

/// Parameters of the Lorenz dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzSpec {
    pub sigma: f64,
    pub rho: f64,
    pub b: f64,
    /// Model time advanced per bin.
    pub dt: f64,
    pub burn_in: usize,
    pub n_bins: usize,
    pub n_conditions: usize,
    pub trials_per_condition: usize,
    pub n_neurons: usize,
    /// Rate, in Hz, of a unit readout activation.
    pub base_rate_hz: f64,
    pub bin_ms: f64,
    /// Standard deviation of the readout weights.
    pub gain: f64,
    pub standardize: Standardization,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for LorenzSpec {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            b: 8.0 / 3.0,
            dt: 0.003,
            burn_in: 500,
            n_bins: 1000,
            n_conditions: 5,
            trials_per_condition: 20,
            n_neurons: 30,
            base_rate_hz: 20.0,
            bin_ms: 1.0,
            gain: 1.0,
            standardize: Standardization::PerCondition,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl LorenzSpec {
    fn validate(&self) -> Result<(), DataError> {
        if !(self.dt > 0.0) || self.n_bins == 0 || self.n_conditions == 0 || self.trials_per_condition == 0 {
            return Err(DataError::Spec("dt, n_bins, n_conditions and trials_per_condition must be positive".into()));
        }
        if self.n_neurons == 0 || !(self.base_rate_hz > 0.0) || !(self.bin_ms > 0.0) || !(self.gain >= 0.0) {
            return Err(DataError::Spec(
                "n_neurons, base_rate_hz and bin_ms must be positive, gain non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(DataError::Spec(format!("train_fraction {} outside [0, 1]", self.train_fraction)));
        }
        Ok(())
    }
}

pub fn lorenz_derivative(s: [f64; 3], sigma: f64, rho: f64, b: f64) -> [f64; 3] {
    let [x, y, z] = s;
    [sigma * (y - x), x * (rho - z) - y, x * y - b * z]
}

pub fn lorenz_euler_step(s: [f64; 3], dt: f64, sigma: f64, rho: f64, b: f64) -> [f64; 3] {
    let d = lorenz_derivative(s, sigma, rho, b);
    [s[0] + dt * d[0], s[1] + dt * d[1], s[2] + dt * d[2]]
}

pub fn lorenz_rk4_step(s: [f64; 3], dt: f64, sigma: f64, rho: f64, b: f64) -> [f64; 3] {
    let f = |v: [f64; 3]| lorenz_derivative(v, sigma, rho, b);
    let add = |a: [f64; 3], k: [f64; 3], h: f64| [a[0] + h * k[0], a[1] + h * k[1], a[2] + h * k[2]];
    let k1 = f(s);
    let k2 = f(add(s, k1, dt / 2.0));
    let k3 = f(add(s, k2, dt / 2.0));
    let k4 = f(add(s, k3, dt));
    let mut out = s;
    for i in 0..3 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// `n_bins` RK4 states after `burn_in` discarded steps, or `None` on divergence.
pub fn lorenz_trajectory(spec: &LorenzSpec, init: [f64; 3]) -> Option<Vec<[f64; 3]>> {
    let mut s = init;
    let mut out = Vec::with_capacity(spec.n_bins);
    for i in 0..spec.burn_in + spec.n_bins {
        s = lorenz_rk4_step(s, spec.dt, spec.sigma, spec.rho, spec.b);
        if !s.iter().all(|v| v.is_finite()) {
            return None;
        }
        if i >= spec.burn_in {
            out.push(s);
        }
    }
    Some(out)
}

const READOUT_STREAM: u64 = 0;
const CONDITION_STREAM: u64 = 1 << 20;
const TRIAL_STREAM: u64 = 1 << 40;

/// Latents shared within a condition; trials differ only in Poisson noise.
/// Labels are condition indices; each condition contributes its first
/// `train_fraction` of trials to train and the rest to test.
pub fn gen_lorenz(spec: &LorenzSpec) -> Result<DatasetBundle, DataError> {
    spec.validate()?;
    let n = spec.n_neurons;
    let mut trajectories = Vec::with_capacity(spec.n_conditions);
    for c in 0..spec.n_conditions {
        let mut rng = stream_rng(spec.seed, CONDITION_STREAM + c as u64);
        let mut found = None;
        for attempt in 0..16 {
            let init = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            match lorenz_trajectory(spec, init) {
                Some(t) => {
                    found = Some(t);
                    break;
                }
                None => warn!("condition {c}: trajectory from {init:?} diverged (attempt {attempt}), redrawing"),
            }
        }
        trajectories.push(found.ok_or(DataError::Diverged { condition: c })?);
    }

    let groups: Vec<Vec<usize>> = match spec.standardize {
        Standardization::PerCondition => (0..spec.n_conditions).map(|c| vec![c]).collect(),
        Standardization::Global => vec![(0..spec.n_conditions).collect()],
    };
    let mut latents: Vec<Vec<f64>> = vec![Vec::new(); spec.n_conditions];
    for group in groups {
        let count = (group.len() * spec.n_bins) as f64;
        let mut mean = [0.0; 3];
        let mut var = [0.0; 3];
        for p in group.iter().flat_map(|&c| &trajectories[c]) {
            for d in 0..3 {
                mean[d] += p[d] / count;
            }
        }
        for p in group.iter().flat_map(|&c| &trajectories[c]) {
            for d in 0..3 {
                var[d] += (p[d] - mean[d]).powi(2) / count;
            }
        }
        let sd = var.map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        for &c in &group {
            latents[c] = trajectories[c].iter().flat_map(|p| (0..3).map(move |d| (p[d] - mean[d]) / sd[d])).collect();
        }
    }

    let mut rng = stream_rng(spec.seed, READOUT_STREAM);
    let w: Vec<f64> = (0..3 * n).map(|_| spec.gain * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let bias: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scale = spec.base_rate_hz * spec.bin_ms * 1e-3;

    let (n_train, _, _) = split_sizes(spec.trials_per_condition, spec.train_fraction, 0.0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, lat) in latents.iter().enumerate() {
        let rates: Vec<f64> = (0..spec.n_bins)
            .flat_map(|t| {
                let l = &lat[3 * t..3 * t + 3];
                let w = &w;
                let bias = &bias;
                (0..n).map(move |j| {
                    let a = bias[j] + (0..3).map(|d| l[d] * w[d * n + j]).sum::<f64>();
                    crate::numerics::softplus(a) * scale
                })
            })
            .collect();
        for k in 0..spec.trials_per_condition {
            let stream = TRIAL_STREAM + (c * spec.trials_per_condition + k) as u64;
            let mut rng = stream_rng(spec.seed, stream);
            let counts = rates.iter().map(|&r| poisson_sample(r, &mut rng)).collect();
            let seq =
                SpikeSequence { n_neurons: n, counts, label: Some(c as u32), latents: lat.clone(), latent_dim: 3 };
            if k < n_train {
                train.push(seq);
            } else {
                test.push(seq);
            }
        }
    }
    Ok(DatasetBundle {
        manifest: Manifest { spec: DatasetSpec::Lorenz(spec.clone()), shuffle_seed: None },
        train,
        validation: Vec::new(),
        test,
    })
}
