//! A desk-scale cascaded diffusion training stack.
//!
//! Continuous-time diffusion with a base generator and two super-resolution
//! stages, epsilon-MSE pre-training and fine-tuning with Adam and EMA,
//! patch-wise PPO alignment against three reward channels, a synthetic
//! curation pipeline, and side-by-side evaluation with exact binomial tests.
//! Everything runs on procedurally generated data at toy resolutions.

pub mod cascade;
pub mod checkpoint;
pub mod cli;
pub mod curation;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod params;
pub mod prompt;
pub mod rl;
pub mod rng;
pub mod scheduler;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};
