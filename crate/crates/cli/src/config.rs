//! One run-configuration file covering dataset building, training, and
//! sampling. Every field has a documented default; unknown keys are rejected
//! by name; command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use portraitlab_core::denoiser::DenoiserConfig;
use portraitlab_core::error::{Error, Result};
use portraitlab_core::losses::LossWeights;
use portraitlab_core::sampler::{SampleMethod, SamplerConfig};
use portraitlab_core::toyfaces::{DatasetConfig, DEFAULT_EMOTIONS};
use portraitlab_core::trainer::TrainConfig;

fn default_emotions() -> Vec<String> {
    DEFAULT_EMOTIONS.iter().map(|s| s.to_string()).collect()
}

/// Corpus location and construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory: holds manifest.jsonl, images/, masks/, refs/.
    pub dir: PathBuf,
    /// Number of corpus samples.
    pub n: usize,
    /// Distinct identities; unset derives one from n.
    pub identities: Option<usize>,
    /// Square image side; must match the denoiser preset when training.
    pub image_size: usize,
    /// Emotion vocabulary used in captions and conditioning.
    pub emotions: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: PathBuf::from("data"),
            n: 512,
            identities: None,
            image_size: 32,
            emotions: default_emotions(),
        }
    }
}

/// Model architecture selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Denoiser preset: "desk" (default), "full", or "gradcheck".
    pub denoiser: String,
    /// Hidden width of the identity-embedding augmentation head.
    pub head_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { denoiser: "desk".into(), head_hidden: 32 }
    }
}

/// Diffusion schedule: step count and linear-beta endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { t_max: 100, beta_start: 1e-3, beta_end: 0.2 }
    }
}

/// Loss weighting; mirrors the trainer's loss-weight block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Attention response ceiling for the identity token.
    pub beta: f64,
    /// Attention response ceiling for the emotion token.
    pub gamma: f64,
    /// Identity-token localization weight; 0 disables attention control.
    pub lambda_id_loc: f64,
    /// Emotion-token localization weight; 0 disables attention control.
    pub mu_expr_loc: f64,
    /// Identity loss is active only for timesteps t <= r_t.
    pub r_t: usize,
    /// Fraction of samples whose noise loss is restricted to the face region.
    pub face_region_loss_fraction: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        // scaled to the default 100-step schedule (same r_t fraction as the
        // reference weights carry at 1000 steps)
        LossSection {
            beta: 0.8,
            gamma: 0.1,
            lambda_id_loc: 1e-3,
            mu_expr_loc: 1e-2,
            r_t: 25,
            face_region_loss_fraction: 0.5,
        }
    }
}

/// Optimization loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Gradients are rescaled when their global norm exceeds this.
    pub clip_norm: f64,
    /// Steps between intermediate checkpoints.
    pub checkpoint_interval: usize,
    /// Output directory for checkpoints and the training log.
    pub out_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            checkpoint_interval: 500,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub method: SampleMethod,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { num_steps: 50, guidance_scale: 5.0, method: SampleMethod::Euler }
    }
}

/// Complete run configuration. The one root seed feeds every named
/// randomness substream (data, timesteps, dropout, initialization, sampling)
/// so equal-seed runs reproduce byte-identical artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub sample: SampleSection,
}

impl RunConfig {
    /// Parse a TOML config file; unknown keys are rejected naming the key.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        match self.model.denoiser.as_str() {
            "desk" => Ok(DenoiserConfig::desk()),
            "full" => Ok(DenoiserConfig::full()),
            "gradcheck" => Ok(DenoiserConfig::gradcheck()),
            other => Err(Error::Config(format!(
                "unknown denoiser preset {other:?}; expected \"desk\", \"full\", or \"gradcheck\""
            ))),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.loss.beta,
            gamma: self.loss.gamma,
            lambda_id_loc: self.loss.lambda_id_loc,
            mu_expr_loc: self.loss.mu_expr_loc,
            r_t: self.loss.r_t,
            face_region_loss_fraction: self.loss.face_region_loss_fraction,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n: self.data.n,
            seed: self.seed,
            n_identities: self.data.identities,
            image_size: self.data.image_size,
            emotions: self.data.emotions.clone(),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let denoiser = self.denoiser_config()?;
        if self.data.image_size != denoiser.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} does not match the {:?} denoiser's input size {}",
                self.data.image_size, self.model.denoiser, denoiser.image_size
            )));
        }
        let cfg = TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            clip_norm: self.train.clip_norm,
            seed: self.seed,
            loss_weights: self.loss_weights(),
            t_max: self.schedule.t_max,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
            manifest: self.data.dir.join("manifest.jsonl"),
            out_dir: self.train.out_dir.clone(),
            checkpoint_interval: self.train.checkpoint_interval,
            denoiser,
            head_hidden: self.model.head_hidden,
            emotions: self.data.emotions.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.sample.num_steps,
            guidance_scale: self.sample.guidance_scale,
            seed: self.seed,
            method: self.sample.method,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_complete_and_consistent() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.data.n, 512);
        // default data size matches the default denoiser preset
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.denoiser.image_size, cfg.data.image_size);
        assert_eq!(tc.loss_weights.r_t, 25);
        let sc = cfg.sampler_config();
        assert_eq!(sc.num_steps, 50);
        assert!((sc.guidance_scale - 5.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = toml::from_str::<RunConfig>("frobnicate = 3\n").unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");
        let err = toml::from_str::<RunConfig>("[train]\nsteps = 5\nwarmup = 2\n").unwrap_err();
        assert!(err.to_string().contains("warmup"), "{err}");
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let cfg: RunConfig =
            toml::from_str("seed = 9\n[train]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.data.image_size, 32);
        // shared seed flows to each component config
        assert_eq!(cfg.dataset_config().seed, 9);
        assert_eq!(cfg.train_config().unwrap().seed, 9);
        assert_eq!(cfg.sampler_config().seed, 9);
    }

    #[test]
    fn bad_preset_and_size_mismatch_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.model.denoiser = "galactic".into();
        assert!(matches!(cfg.denoiser_config(), Err(Error::Config(m)) if m.contains("galactic")));
        let mut cfg = RunConfig::default();
        cfg.data.image_size = 16;
        assert!(cfg.train_config().is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
