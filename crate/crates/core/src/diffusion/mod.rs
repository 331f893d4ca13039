//! Latent diffusion: noise schedule, DDIM sampling, guidance, the embedding prior and the triplane UNet.

pub mod ddim;
pub mod guidance;
pub mod prior;
pub mod schedule;
pub mod train;
pub mod unet;

pub use ddim::{ddim_sample, ddim_sample_from, ddim_timesteps, Denoiser, Prediction};
pub use guidance::{cfg_combine, GuidanceScales};
pub use prior::{PriorConfig, PriorDenoiser, PriorModel, TimeEmbedding};
pub use schedule::NoiseSchedule;
pub use unet::{CrossAttention, GuidedDenoiser, UNet, UNetConfig};
pub use train::{
    diffuse_rows, prior_loss, train_step_prior, train_step_triplane, triplane_loss, DropoutRates, PriorBatch,
    StepOptions, TriplaneBatch,
};
