//! Uncertainty-aware, multi-objective reinforcement-learning fine-tuning of
//! an E(3)-equivariant 3D molecular diffusion model.

pub mod ablation;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod molgraph;
pub mod ppo;
pub mod pretrain;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod uncertainty;

pub use error::{Error, Result};
