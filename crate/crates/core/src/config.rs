//! Run configuration: model sizes, training schedule, and scene documents.
//!
//! Every field has a documented default and deserializes strictly
//! (unknown keys are rejected).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;

/// Network sizes and representation constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width of coupling scale/shift MLPs.
    pub coupling_width: usize,
    /// Non-linear invertible layers in the static stack.
    pub n_static_layers: usize,
    /// Non-linear invertible layers in the dynamic stack.
    pub n_dynamic_layers: usize,
    /// Bound on coupling log-scales (tanh-scaled exponent).
    pub scale_cap: f64,
    /// Per-frame latent code width.
    pub phi_dim: usize,
    /// Hidden width of the latent-code network.
    pub phi_hidden: usize,
    /// Hidden width of the affine-parameter network.
    pub affine_hidden: usize,
    /// Sinusoidal time-embedding frequencies.
    pub time_freqs: usize,
    /// Filter layers per coordinate network.
    pub volume_layers: usize,
    /// Channels per coordinate-network layer.
    pub volume_width: usize,
    /// Gabor frequency init scale over the unit canonical box.
    pub freq_scale: f64,
    /// Rendered feature dimension.
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            coupling_width: 64,
            n_static_layers: 3,
            n_dynamic_layers: 6,
            scale_cap: 2.0,
            phi_dim: 128,
            phi_hidden: 256,
            affine_hidden: 64,
            time_freqs: 8,
            volume_layers: 3,
            volume_width: 64,
            freq_scale: 8.0,
            feature_dim: 8,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: trims the coupling width so a 20k-iteration run
    /// fits a single-core CPU budget. Volume sizes stay at the defaults.
    pub fn desk() -> Self {
        Self {
            coupling_width: 32,
            ..Self::default()
        }
    }

    /// Paper-scale sizes, for completeness; far beyond CPU budgets.
    pub fn full_scale() -> Self {
        Self {
            coupling_width: 256,
            volume_width: 512,
            feature_dim: 768,
            ..Self::default()
        }
    }
}

/// Whether the model keeps the decoupled static/dynamic branches or a
/// single unified volume and transform (ablation baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Decoupled,
    Unified,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1_dy: f64,
    pub lambda2_dy: f64,
    pub lambda1_st: f64,
    pub lambda2_st: f64,
    pub lambda1_cb: f64,
    /// Weight of the temporal smoothness regularizer.
    pub w_smooth: f64,
    /// Weight of the distortion regularizer.
    pub w_distort: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1_dy: 1.0,
            lambda2_dy: 10.0,
            lambda1_st: 1.0,
            lambda2_st: 1.0,
            lambda1_cb: 1.0,
            w_smooth: 0.1,
            w_distort: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Flow samples per batch, split across frame pairs.
    pub flows_per_batch: usize,
    pub frame_pairs_per_batch: usize,
    /// Depth samples per ray.
    pub k_samples: usize,
    pub lr_volumes: f64,
    pub lr_transforms: f64,
    pub lr_time_embed: f64,
    pub warmup_steps: u64,
    pub decay_interval: u64,
    pub decay_factor: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Cycle-consistency threshold in pixels at 256 resolution.
    pub tau_cycle: f64,
    /// Fraction of iterations with supervision-mask gating before the
    /// rendered mask (detached) takes over.
    pub mask_phase_frac: f64,
    /// Hard-mining refresh cadence as a fraction of total iterations.
    pub mining_refresh_frac: f64,
    /// Rays per batch contributing to the smoothness regularizer.
    pub smoothness_rays: usize,
    pub mode: ModelMode,
    pub use_feature_loss: bool,
    /// Depth-match tolerance for visibility, as a fraction of (z_far - z_near).
    pub eps_vis_frac: f64,
    /// Minimum accumulated opacity for visibility.
    pub tau_opacity: f64,
    /// Log losses every n steps (1 = every step).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            flows_per_batch: 256,
            frame_pairs_per_batch: 8,
            k_samples: 32,
            lr_volumes: 3e-4,
            lr_transforms: 1e-4,
            lr_time_embed: 1e-3,
            warmup_steps: 1000,
            decay_interval: 20_000,
            decay_factor: 0.5,
            weights: LossWeights::default(),
            seed: 0,
            tau_cycle: 3.0,
            mask_phase_frac: 0.3,
            mining_refresh_frac: 0.1,
            smoothness_rays: 16,
            mode: ModelMode::Decoupled,
            use_feature_loss: true,
            eps_vis_frac: 0.05,
            tau_opacity: 0.5,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset matching [`ModelConfig::desk`].
    pub fn desk() -> Self {
        Self {
            flows_per_batch: 64,
            k_samples: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flows_per_batch == 0
            || self.frame_pairs_per_batch == 0
            || self.k_samples == 0
            || self.decay_interval == 0
        {
            return Err(Error::Config(
                "batch sizes, K and decay interval must be positive".into(),
            ));
        }
        if self.flows_per_batch % self.frame_pairs_per_batch != 0 {
            return Err(Error::Config(format!(
                "flows_per_batch ({}) must be divisible by frame_pairs_per_batch ({})",
                self.flows_per_batch, self.frame_pairs_per_batch
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_phase_frac) {
            return Err(Error::Config("mask_phase_frac must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn rays_per_pair(&self) -> usize {
        self.flows_per_batch / self.frame_pairs_per_batch
    }
}

/// Full run document: model + training + camera, overridable field by
/// field from the command line.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub camera: Camera,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            camera: Camera::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back.train.flows_per_batch, 256);
        assert_eq!(back.train.k_samples, 32);
        assert_eq!(back.model.volume_width, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"train": {"iterations": 10, "not_a_key": 1}}"#;
        assert!(RunConfig::from_json(text).is_err());
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"iterations": 7}}"#).unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.warmup_steps, 1000);
    }

    #[test]
    fn indivisible_batch_rejected() {
        let cfg = RunConfig::from_json(r#"{"train": {"flows_per_batch": 10, "frame_pairs_per_batch": 3}}"#);
        assert!(cfg.is_err());
    }
}
