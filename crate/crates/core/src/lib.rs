//! Continuous-token video modeling at desk scale.
//!
//! The crate compresses synthetic video frames into a handful of continuous
//! tokens with a query transformer, reconstructs clips from boundary tokens
//! with a small diffusion denoiser, and models token sequences with a causal
//! transformer whose prediction head is an L2, Gaussian, or Gaussian-mixture
//! density model. Everything runs on a deterministic 64-bit CPU tensor core
//! with reverse-mode autodiff, so every gradient in the system can be checked
//! against finite differences.

pub mod ar;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use cli::cli_main;
pub use error::{Error, Result};
