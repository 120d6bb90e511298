//! Bidirectionally decoupled preference optimization (BideDPO) on a toy
//! conditional diffusion model.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode autodiff, RNG streams, gradient checks
//! - [`diffusion`]: noise schedule, conditional MLP denoiser, ancestral sampler
//! - [`world`]: procedural shapes, condition extraction and the text judge
//! - [`preference`]: rewards, coupled/decoupled DPO losses, loss balancing
//! - [`pipeline`]: automated construction of disentangled preference data
//! - [`trainer`]: pretraining, SFT/DPO/BideDPO fine-tuning, low-rank adapters
//! - [`evaluation`]: success ratio, condition fidelity and semantic-guided metrics
//! - [`commands`]: config-driven entry points used by the CLI

pub mod commands;
pub mod config;
pub mod diffusion;
pub mod evaluation;
pub mod numerics;
pub mod pipeline;
pub mod preference;
pub mod trainer;
pub mod world;

/// Version string stamped into every artifact.
pub const CODE_VERSION: &str = concat!("bidedpo-", env!("CARGO_PKG_VERSION"));
