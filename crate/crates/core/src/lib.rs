//! Toy laboratory for guidance of personalized diffusion models.
//!
//! A small conditional denoiser is pretrained on a 2-D Gaussian mixture,
//! fine-tuned on a handful of points from a novel concept, and sampled with
//! classifier-free guidance, autoguidance, or guidance whose weak model is a
//! weight interpolation between the pretrained and fine-tuned parameters.
//! Exact mixture scores serve as oracles throughout.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod datasets;
pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod sampler;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
