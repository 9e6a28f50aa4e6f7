//! Diffusion bridges over vector-quantized latent spaces.
//!
//! The library couples an Ornstein-Uhlenbeck noising process on continuous
//! latents with a discrete codebook read-out. Forward kernels, bridge
//! posteriors and the denoising parameterization are closed-form
//! ([`ou_bridge`]); the quantization layer ([`quantizer`]) maps latents to
//! codebook states through nearest-neighbour or Gumbel-Softmax assignments.
//! Training ([`training`]) maximizes an evidence lower bound made of a
//! reconstruction term, a per-step denoising term and a temperature-weighted
//! regularizer, with exact gradients from a small reverse-mode tape
//! ([`autodiff`]). Ancestral sampling and inpainting live in [`generation`],
//! the synthetic walk dataset in [`toy_domain`] and the metric suite in
//! [`evaluation`].

pub mod assignment;
pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod mat;
pub mod noise_model;
pub mod ou_bridge;
pub mod quantizer;
pub mod toy_domain;
pub mod training;

pub use error::{Error, Result};
pub use mat::Matrix;
