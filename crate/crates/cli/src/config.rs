//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splitvae::evaluation::EvalSpec;
use splitvae::model::ModelConfig;
use splitvae::synthdata::{DatasetSpec, Manifest};
use splitvae::training::{GradCheckSetup, TrainConfig};

use crate::error::CliError;

/// One experiment: data, model, schedule and evaluation.
///
/// `seed` is authoritative: it replaces the training seed and the
/// dataset generator seed when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Existing bundle directory; used instead of `dataset` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<Manifest>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradCheckSetup>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copies the top-level seed into the training and dataset seeds.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        if let Some(m) = &mut self.dataset {
            match &mut m.spec {
                DatasetSpec::Lorenz(s) => s.seed = self.seed,
                DatasetSpec::Nontemporal(s) => s.seed = self.seed,
                DatasetSpec::Scene(s) => s.seed = self.seed,
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 11
output_dir = "runs/x"

[dataset.spec]
kind = "nontemporal"

[model]
n_neurons = 100
latent_dim = 2
seq_len = 1
max_offset = 0
"#;

    #[test]
    fn round_trips_losslessly() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.to_toml(), cfg.to_toml());
        let with_gc = ExperimentConfig { gradcheck: Some(GradCheckSetup::default()), ..cfg };
        assert_eq!(ExperimentConfig::from_toml(&with_gc.to_toml()).unwrap(), with_gc);
    }

    #[test]
    fn seed_propagates() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.seed, 11);
        match &cfg.dataset.unwrap().spec {
            DatasetSpec::Nontemporal(s) => assert_eq!(s.seed, 11),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in [
            format!("{MINIMAL}\nbogus = 1\n"),
            MINIMAL.replace("latent_dim", "latent_dims"),
            format!("{MINIMAL}\n[train]\nlr = 0.1\n"),
            format!("{MINIMAL}\n[eval]\nprotocol = \"scene\"\nwindow = 3\n"),
            MINIMAL.replace("kind = \"nontemporal\"", "kind = \"nontemporal\"\nclusters = 4"),
        ] {
            assert!(matches!(ExperimentConfig::from_toml(&bad), Err(CliError::Usage(_))), "{bad}");
        }
    }
}
