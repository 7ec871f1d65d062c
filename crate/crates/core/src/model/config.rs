use serde::{Deserialize, Serialize};

use super::ModelError;

/// Recurrent cell used for both state factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Gru,
    Rnn,
    Lstm,
}

/// Prior over the style latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Gaussian conditioned on the previous style state.
    #[default]
    TimeDependent,
    /// N(0, I) at every step, ignoring the state.
    StandardNormal,
}

fn default_beta() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    1.0
}
fn default_prior_l2() -> f64 {
    0.01
}
fn default_tau() -> f64 {
    0.5
}

/// Architecture, loss weights and sequence geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_neurons: usize,
    /// Total latent width; split evenly into content and style halves.
    pub latent_dim: usize,
    /// Width of each state factor. Defaults to `latent_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    #[serde(default)]
    pub cell: CellKind,
    #[serde(default)]
    pub prior: PriorKind,
    /// KL weight.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Contrastive weight.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Weight of the L2 penalty on prior parameters.
    #[serde(default = "default_prior_l2")]
    pub prior_l2: f64,
    /// NT-Xent temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Training window length in time bins.
    pub seq_len: usize,
    /// Largest absolute offset of a positive window.
    pub max_offset: usize,
    /// Number of antecedent bins used by sliding-window inference.
    #[serde(default)]
    pub markov_order: usize,
}

impl ModelConfig {
    pub fn new(n_neurons: usize, latent_dim: usize, seq_len: usize, max_offset: usize) -> Self {
        Self {
            n_neurons,
            latent_dim,
            state_dim: None,
            cell: CellKind::Gru,
            prior: PriorKind::TimeDependent,
            beta: default_beta(),
            gamma: default_gamma(),
            prior_l2: default_prior_l2(),
            tau: default_tau(),
            seq_len,
            max_offset,
            markov_order: seq_len.saturating_sub(1),
        }
    }

    pub fn content_dim(&self) -> usize {
        self.latent_dim / 2
    }

    pub fn style_dim(&self) -> usize {
        self.latent_dim / 2
    }

    pub fn hidden_dim(&self) -> usize {
        self.state_dim.unwrap_or(self.latent_dim)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.n_neurons == 0 {
            return bad("n_neurons must be positive".into());
        }
        if self.latent_dim == 0 || !self.latent_dim.is_multiple_of(2) {
            return bad(format!("latent_dim must be even and positive, got {}", self.latent_dim));
        }
        if self.hidden_dim() == 0 {
            return bad("state_dim must be positive".into());
        }
        if self.seq_len == 0 {
            return bad("seq_len must be positive".into());
        }
        // Single-bin windows pair each sample with itself.
        if self.seq_len > 1 && (self.max_offset == 0 || self.max_offset >= self.seq_len) {
            return bad(format!(
                "max_offset must satisfy 0 < max_offset < seq_len, got {} with seq_len {}",
                self.max_offset, self.seq_len
            ));
        }
        if self.seq_len == 1 && self.max_offset != 0 {
            return bad("max_offset must be 0 when seq_len is 1".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("prior_l2", self.prior_l2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative weight, got {v}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::new(4, 4, 3, 2).validate().is_ok());
        assert!(ModelConfig::new(4, 5, 3, 2).validate().is_err());
        assert!(ModelConfig::new(4, 4, 3, 3).validate().is_err());
        assert!(ModelConfig::new(4, 4, 3, 0).validate().is_err());
        assert!(ModelConfig::new(4, 4, 1, 0).validate().is_ok());
        let mut c = ModelConfig::new(4, 4, 3, 2);
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_dims() {
        let c = ModelConfig::new(30, 8, 50, 10);
        assert_eq!((c.content_dim(), c.style_dim(), c.hidden_dim()), (4, 4, 8));
    }

    #[test]
    fn unknown_keys_rejected() {
        let s = r#"{"n_neurons":3,"latent_dim":4,"seq_len":3,"max_offset":1,"betta":2.0}"#;
        assert!(serde_json::from_str::<ModelConfig>(s).is_err());
    }
}
