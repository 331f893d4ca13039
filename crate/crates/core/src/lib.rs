//! Triplane autoencoder, isosurface extraction, rendering and latent diffusion.

pub mod attend;
pub mod autoencoder;
pub mod decode;
pub mod diffusion;
pub mod encode;
pub mod error;
pub mod iso;
pub mod nn;
pub mod optim;
pub mod pcio;
pub mod render;
pub mod triplane;

pub use error::{CoreError, Result};
