//! Four-cluster dataset: arcs of 2-D latents pushed through a RealNVP flow.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    poisson_sample, split_sizes, stream_rng, DataError, DatasetBundle, DatasetSpec, Manifest, RealNvp, SpikeSequence,
};
use crate::model::GaussianParams;

/// Floor on each latent variance.
pub const VARIANCE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonTemporalSpec {
    pub n_clusters: usize,
    pub samples_per_cluster: usize,
    pub obs_dim: usize,
    pub flow_depth: usize,
    pub flow_hidden: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for NonTemporalSpec {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            samples_per_cluster: 4000,
            obs_dim: 100,
            flow_depth: 4,
            flow_hidden: 64,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Latent distribution given the label `u`.
pub fn cluster_latent_distribution(u: f64) -> GaussianParams {
    let c = u.cos().abs();
    let var = [(0.6 - 0.5 * c).max(VARIANCE_FLOOR), (0.5 * c).max(VARIANCE_FLOOR)];
    GaussianParams { mean: vec![5.0 * u.sin(), 5.0 * u.cos()], log_variance: var.iter().map(|v| v.ln()).collect() }
}

/// Label interval `[2iπ/K, (2i+1)π/K]` of cluster `i` out of `K`.
pub fn cluster_interval(i: usize, k: usize) -> (f64, f64) {
    let pi = std::f64::consts::PI;
    (2.0 * i as f64 * pi / k as f64, (2.0 * i as f64 + 1.0) * pi / k as f64)
}

const FLOW_SEED_OFFSET: u64 = 0x5eed;
const CLUSTER_STREAM: u64 = 1 << 20;

/// Single-bin trials. Cluster `i` draws `u ~ U[2iπ/K, (2i+1)π/K]` with
/// `K = n_clusters`; the 2-D latent is stored as ground truth and the
/// cluster index as label. Counts are Poisson with rates
/// `softplus(flow(z))`.
pub fn gen_nontemporal(spec: &NonTemporalSpec) -> Result<DatasetBundle, DataError> {
    if spec.n_clusters == 0 || spec.samples_per_cluster == 0 || spec.obs_dim < 2 || spec.flow_hidden == 0 {
        return Err(DataError::Spec("cluster, sample, flow sizes must be positive and obs_dim ≥ 2".into()));
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(DataError::Spec(format!("train_fraction {} outside [0, 1]", spec.train_fraction)));
    }
    let flow = RealNvp::random(spec.obs_dim, spec.flow_depth, spec.flow_hidden, spec.seed ^ FLOW_SEED_OFFSET);
    let (n_train, _, _) = split_sizes(spec.samples_per_cluster, spec.train_fraction, 0.0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..spec.n_clusters {
        let mut rng = stream_rng(spec.seed, CLUSTER_STREAM + i as u64);
        let (lo, hi) = cluster_interval(i, spec.n_clusters);
        for s in 0..spec.samples_per_cluster {
            let u = rng.random_range(lo..hi);
            let g = cluster_latent_distribution(u);
            let z: Vec<f64> = (0..2)
                .map(|d| {
                    g.mean[d] + (0.5 * g.log_variance[d]).exp() * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            let counts =
                flow.forward(&z).into_iter().map(|a| poisson_sample(crate::numerics::softplus(a), &mut rng)).collect();
            let seq =
                SpikeSequence { n_neurons: spec.obs_dim, counts, label: Some(i as u32), latents: z, latent_dim: 2 };
            if s < n_train {
                train.push(seq);
            } else {
                test.push(seq);
            }
        }
    }
    Ok(DatasetBundle {
        manifest: Manifest { spec: DatasetSpec::Nontemporal(spec.clone()), shuffle_seed: None },
        train,
        validation: Vec::new(),
        test,
    })
}
