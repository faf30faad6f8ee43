//! Two-stage text-to-image generation over a frozen understanding encoder's
//! latent space: a rectified-flow generator samples channel-reduced encoder
//! latents, and a jointly trained pixel diffusion decoder maps them to images.

pub mod baselines;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod genmodel;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod reducer;
pub mod rng;
pub mod toydata;

pub use error::{Error, Result};
