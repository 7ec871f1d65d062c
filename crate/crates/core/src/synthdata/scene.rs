//! Labeled trials built from per-class rate templates.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{poisson_sample, split_sizes, stream_rng, DataError, DatasetBundle, DatasetSpec, Manifest, SpikeSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub n_bins: usize,
    pub n_neurons: usize,
    /// Template rates are drawn from `U[0, max_rate]` per bin and neuron.
    pub max_rate: f64,
    /// Standard deviation of the per-trial additive rate jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { n_classes: 8, trials_per_class: 50, n_bins: 25, n_neurons: 30, max_rate: 1.0, jitter: 0.1, seed: 0 }
    }
}

const TEMPLATE_STREAM: u64 = 0;
const TRIAL_STREAM: u64 = 1 << 20;

/// Random templates, then [`gen_scene_from_templates`].
pub fn gen_scene_surrogate(spec: &SceneSpec) -> Result<DatasetBundle, DataError> {
    if spec.n_classes == 0 || spec.trials_per_class == 0 || spec.n_bins == 0 || spec.n_neurons == 0 {
        return Err(DataError::Spec("scene sizes must be positive".into()));
    }
    if !(spec.max_rate > 0.0) || !(spec.jitter >= 0.0) {
        return Err(DataError::Spec("max_rate must be positive and jitter non-negative".into()));
    }
    let mut rng = stream_rng(spec.seed, TEMPLATE_STREAM);
    let templates: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.n_bins * spec.n_neurons).map(|_| rng.random_range(0.0..spec.max_rate)).collect())
        .collect();
    let mut bundle =
        gen_scene_from_templates(&templates, spec.n_neurons, spec.trials_per_class, spec.jitter, spec.seed)?;
    bundle.manifest = Manifest { spec: DatasetSpec::Scene(spec.clone()), shuffle_seed: None };
    Ok(bundle)
}

/// Trials of each class are `Poisson(max(template + jitter·ε, 0))`, split
/// 80/10/10 within each class.
pub fn gen_scene_from_templates(
    templates: &[Vec<f64>],
    n_neurons: usize,
    trials_per_class: usize,
    jitter: f64,
    seed: u64,
) -> Result<DatasetBundle, DataError> {
    if templates.iter().any(|t| t.is_empty() || t.len() % n_neurons != 0) {
        return Err(DataError::Spec("templates must be nonempty T × N grids".into()));
    }
    let (n_train, n_val, _) = split_sizes(trials_per_class, 0.8, 0.1);
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, template) in templates.iter().enumerate() {
        for k in 0..trials_per_class {
            let mut rng = stream_rng(seed, TRIAL_STREAM + (c * trials_per_class + k) as u64);
            let counts = template
                .iter()
                .map(|&r| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    poisson_sample((r + jitter * e).max(0.0), &mut rng)
                })
                .collect();
            let seq = SpikeSequence { n_neurons, counts, label: Some(c as u32), latents: Vec::new(), latent_dim: 0 };
            match k {
                k if k < n_train => train.push(seq),
                k if k < n_train + n_val => validation.push(seq),
                _ => test.push(seq),
            }
        }
    }
    let spec = SceneSpec {
        n_classes: templates.len(),
        trials_per_class,
        n_bins: templates[0].len() / n_neurons,
        n_neurons,
        max_rate: 0.0,
        jitter,
        seed,
    };
    Ok(DatasetBundle {
        manifest: Manifest { spec: DatasetSpec::Scene(spec), shuffle_seed: None },
        train,
        validation,
        test,
    })
}
