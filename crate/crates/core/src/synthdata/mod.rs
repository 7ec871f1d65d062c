//! Synthetic spike-count datasets with known latents or class labels.

mod lorenz;
mod nontemporal;
mod realnvp;
mod scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::Tensor;

pub use lorenz::{
    gen_lorenz, lorenz_derivative, lorenz_euler_step, lorenz_rk4_step, lorenz_trajectory, LorenzSpec, Standardization,
};
pub use nontemporal::{
    cluster_interval, cluster_latent_distribution, gen_nontemporal, NonTemporalSpec, VARIANCE_FLOOR,
};
pub use realnvp::RealNvp;
pub use scene::{gen_scene_from_templates, gen_scene_surrogate, SceneSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("trajectory diverged from every initial point tried for condition {condition}")]
    Diverged { condition: usize },
}

/// One trial of binned spike counts, `T × N` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeSequence {
    pub n_neurons: usize,
    pub counts: Vec<u32>,
    pub label: Option<u32>,
    /// Ground-truth latents, `T × latent_dim` row-major (empty when absent).
    pub latents: Vec<f64>,
    pub latent_dim: usize,
}

impl SpikeSequence {
    pub fn len(&self) -> usize {
        self.counts.len().checked_div(self.n_neurons).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bin(&self, t: usize) -> &[u32] {
        &self.counts[t * self.n_neurons..(t + 1) * self.n_neurons]
    }

    pub fn latent(&self, t: usize) -> &[f64] {
        &self.latents[t * self.latent_dim..(t + 1) * self.latent_dim]
    }

    /// Counts as a `T × N` float tensor.
    pub fn counts_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.n_neurons, self.counts.iter().map(|&c| c as f64).collect())
            .expect("counts are T × N")
    }

    /// Counts of bins `start..start + len` as one `1 × N` tensor per bin.
    pub fn window(&self, start: usize, len: usize) -> Vec<Tensor> {
        (start..start + len).map(|t| Tensor::row(&self.bin(t).iter().map(|&c| c as f64).collect::<Vec<_>>())).collect()
    }
}

/// Which generator produced a bundle, with all of its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Lorenz(LorenzSpec),
    Nontemporal(NonTemporalSpec),
    Scene(SceneSpec),
}

/// Everything needed to regenerate a bundle bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: DatasetSpec,
    /// Seed of the per-trial time permutation, when the control was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Runs the generator (and shuffle) the manifest describes.
    pub fn regenerate(&self) -> Result<DatasetBundle, DataError> {
        let bundle = match &self.spec {
            DatasetSpec::Lorenz(s) => gen_lorenz(s)?,
            DatasetSpec::Nontemporal(s) => gen_nontemporal(s)?,
            DatasetSpec::Scene(s) => gen_scene_surrogate(s)?,
        };
        Ok(match self.shuffle_seed {
            Some(seed) => shuffle_time(&bundle, seed),
            None => bundle,
        })
    }
}

/// Train/validation/test partitions plus the manifest that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    pub train: Vec<SpikeSequence>,
    pub validation: Vec<SpikeSequence>,
    pub test: Vec<SpikeSequence>,
}

/// Partition names in file order.
pub const PARTITIONS: [&str; 3] = ["train", "validation", "test"];

impl DatasetBundle {
    pub fn partition(&self, name: &str) -> Option<&[SpikeSequence]> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn n_neurons(&self) -> usize {
        self.train.iter().chain(&self.validation).chain(&self.test).next().map_or(0, |s| s.n_neurons)
    }
}

/// Poisson draw; a zero rate always yields zero.
pub fn poisson_sample(rate: f64, rng: &mut impl Rng) -> u32 {
    if rate > 0.0 {
        Poisson::new(rate).expect("positive finite rate").sample(rng) as u32
    } else {
        0
    }
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Permutes the bins of every trial independently, carrying the latents
/// along. Trial `i` (counted across train, validation, test) uses stream `i`.
pub fn shuffle_time(bundle: &DatasetBundle, seed: u64) -> DatasetBundle {
    let mut index = 0u64;
    let mut shuffle = |trials: &[SpikeSequence]| -> Vec<SpikeSequence> {
        trials
            .iter()
            .map(|s| {
                let mut rng = stream_rng(seed, index);
                index += 1;
                let mut perm: Vec<usize> = (0..s.len()).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                permute(s, &perm)
            })
            .collect()
    };
    let train = shuffle(&bundle.train);
    let validation = shuffle(&bundle.validation);
    let test = shuffle(&bundle.test);
    DatasetBundle {
        manifest: Manifest { shuffle_seed: Some(seed), ..bundle.manifest.clone() },
        train,
        validation,
        test,
    }
}

/// Reorders the bins of a trial: output bin `t` is input bin `perm[t]`.
pub fn permute(s: &SpikeSequence, perm: &[usize]) -> SpikeSequence {
    let mut counts = Vec::with_capacity(s.counts.len());
    let mut latents = Vec::with_capacity(s.latents.len());
    for &t in perm {
        counts.extend_from_slice(s.bin(t));
        if s.latent_dim > 0 {
            latents.extend_from_slice(s.latent(t));
        }
    }
    SpikeSequence { counts, latents, ..s.clone() }
}

/// Mean over trials and latent dimensions of the lag-1 autocorrelation.
pub fn mean_lag1_autocorrelation(trials: &[SpikeSequence]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for s in trials {
        let t_len = s.len();
        if t_len < 3 {
            continue;
        }
        for d in 0..s.latent_dim {
            let v: Vec<f64> = (0..t_len).map(|t| s.latent(t)[d]).collect();
            let m = v.iter().sum::<f64>() / t_len as f64;
            let den: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
            if den == 0.0 {
                continue;
            }
            let num: f64 = v.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
            acc += num / den;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Split sizes `(train, validation, test)` for `n` items.
pub(crate) fn split_sizes(n: usize, train: f64, validation: f64) -> (usize, usize, usize) {
    let n_train = (n as f64 * train).round() as usize;
    let n_val = ((n as f64 * validation).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    (n_train, n_val, n - n_train - n_val)
}
