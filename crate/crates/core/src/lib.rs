//! Text-conditioned sign-pose generation with a latent diffusion model.
//!
//! Pose sequences are compressed by a transformer VAE, paired with sentence
//! embeddings in a contrastively trained shared space, and generated from
//! text by a conditional DDPM over the VAE latents whose training loss adds
//! a time-discounted semantic alignment term.

pub mod aligner;
pub mod autodiff;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod persistence;
pub mod pipeline;
pub mod pose;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
