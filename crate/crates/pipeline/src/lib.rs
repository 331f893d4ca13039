//! Synthetic data, three-stage training, generation and ablations for the triplane generator.

pub mod ablate;
pub mod checks;
pub mod config;
pub mod error;
pub mod generate;
pub mod stages;
pub mod synth;

pub use config::{Profile, RunConfig};
pub use error::{PipelineError, Result};
