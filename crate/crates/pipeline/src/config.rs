//! Run configuration with desk and paper profiles, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use triplane_core::autoencoder::AutoencoderConfig;
use triplane_core::diffusion::{DropoutRates, GuidanceScales, NoiseSchedule, PriorConfig, UNetConfig};
use triplane_core::optim::CosineSchedule;
use triplane_core::render::LossWeights;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_shapes: usize,
    /// Points per surface cloud `N`.
    pub num_points: usize,
    /// Grid used to mesh the analytic ground truth.
    pub gt_grid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    /// Cameras per shape.
    pub count: usize,
    pub image_size: usize,
    pub fov_deg: f64,
    pub radius: f64,
    /// Views rendered per stage-1 step.
    pub per_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub batch: usize,
    /// Checkpoint interval in steps; the final step is always saved.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            start: self.lr_start,
            end: self.lr_end,
            total_steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Forward-process length `T`.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    pub guidance: GuidanceScales,
    pub dropout: DropoutRates,
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    /// Root for datasets, checkpoints, logs and exports.
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub paths: PathConfig,
    pub data: DataConfig,
    pub views: ViewConfig,
    pub autoencoder: AutoencoderConfig,
    pub loss: LossWeights,
    pub stage1: TrainConfig,
    pub prior: PriorConfig,
    pub stage2: TrainConfig,
    pub unet: UNetConfig,
    pub stage3: TrainConfig,
    pub diffusion: DiffusionConfig,
}

impl RunConfig {
    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Laptop-CPU scale.
    pub fn desk() -> Self {
        let ae = AutoencoderConfig::desk();
        let prior = PriorConfig::desk();
        let fast = |steps, batch, clip| TrainConfig {
            steps,
            lr_start: 3e-3,
            lr_end: 3e-4,
            weight_decay: 0.0,
            clip_norm: clip,
            batch,
            checkpoint_every: 100,
        };
        RunConfig {
            profile: Profile::Desk,
            seed: 0,
            paths: PathConfig { out: PathBuf::from("runs") },
            data: DataConfig {
                num_shapes: 8,
                num_points: 2048,
                gt_grid: 48,
            },
            views: ViewConfig {
                count: 8,
                image_size: 64,
                fov_deg: 40.0,
                radius: 3.0,
                per_step: 8,
            },
            loss: LossWeights {
                kl: 1e-4,
                ..LossWeights::default()
            },
            stage1: fast(500, 1, Some(1.0)),
            stage2: fast(1500, 32, Some(1.0)),
            unet: UNetConfig {
                latent_res: ae.encoder.latent_res,
                latent_channels: ae.encoder.latent_channels,
                width: 16,
                levels: 2,
                embed_dim: prior.dim,
            },
            stage3: fast(4000, 16, None),
            prior,
            autoencoder: ae,
            diffusion: DiffusionConfig {
                timesteps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                ddim_steps: 50,
                guidance: GuidanceScales::default(),
                dropout: DropoutRates::default(),
            },
        }
    }

    /// Published model scale.
    pub fn paper() -> Self {
        let slow = |steps, batch| TrainConfig {
            steps,
            lr_start: 3e-5,
            lr_end: 3e-6,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            batch,
            checkpoint_every: 5000,
        };
        RunConfig {
            profile: Profile::Paper,
            seed: 0,
            paths: PathConfig { out: PathBuf::from("runs") },
            data: DataConfig {
                num_shapes: 100_000,
                num_points: 100_000,
                gt_grid: 128,
            },
            views: ViewConfig {
                count: 40,
                image_size: 512,
                fov_deg: 40.0,
                radius: 3.0,
                per_step: 4,
            },
            autoencoder: AutoencoderConfig::paper(),
            loss: LossWeights::default(),
            stage1: slow(500_000, 1),
            prior: PriorConfig::paper(),
            stage2: slow(500_000, 256),
            unet: UNetConfig::paper(),
            stage3: slow(500_000, 64),
            diffusion: DiffusionConfig {
                timesteps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                ddim_steps: 50,
                guidance: GuidanceScales::default(),
                dropout: DropoutRates::default(),
            },
        }
    }

    /// Scalars in one triplane latent, `3 c′ r′²`.
    pub fn latent_scalars(&self) -> usize {
        self.autoencoder.latent_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Usage(m));
        self.autoencoder.validate()?;
        self.unet.validate()?;
        self.diffusion.dropout.validate()?;
        self.diffusion.schedule()?;
        let e = &self.autoencoder.encoder;
        if self.unet.latent_res != e.latent_res || self.unet.latent_channels != e.latent_channels {
            return bad("UNet latent shape must match the autoencoder latent".into());
        }
        if self.unet.embed_dim != self.prior.dim {
            return bad("UNet embedding width must equal the prior dimension".into());
        }
        if self.data.num_shapes == 0 || self.data.num_points == 0 {
            return bad("dataset needs at least one shape and one point".into());
        }
        if self.views.count == 0 || self.views.per_step == 0 || self.views.image_size == 0 {
            return bad("view set must be non-empty".into());
        }
        if self.diffusion.ddim_steps == 0 || self.diffusion.ddim_steps > self.diffusion.timesteps {
            return bad(format!("ddim_steps must lie in [1, {}]", self.diffusion.timesteps));
        }
        for (name, t) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("stage3", &self.stage3)] {
            if t.batch == 0 || t.checkpoint_every == 0 {
                return bad(format!("{name}: batch and checkpoint_every must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| PipelineError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(PipelineError::io(format!("reading {}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(PipelineError::io(format!("writing {}", path.display())))
    }

    /// Directory holding the synthetic dataset.
    pub fn data_dir(&self) -> PathBuf {
        self.paths.out.join("data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip_through_toml() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn profiles_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let text = RunConfig::desk().to_toml().unwrap();
        assert!(RunConfig::from_toml(&text).is_ok());
        assert!(RunConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
        assert!(RunConfig::from_toml(&text.replace("[stage1]\n", "[stage1]\nbogus = 1\n")).is_err());
        assert!(RunConfig::from_toml(&text.replace("profile = \"desk\"", "profile = \"huge\"")).is_err());
        let mut cfg = RunConfig::desk();
        cfg.unet.embed_dim += 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_latent_is_small() {
        assert_eq!(RunConfig::desk().latent_scalars(), 3 * 4 * 4 * 4);
    }
}
