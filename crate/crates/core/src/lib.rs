//! Video diffusion sampling engine.
//!
//! The engine is denoiser-agnostic: anything implementing
//! [`denoiser::Denoiser`] can be sampled with dual-condition guidance, run
//! through long-video score correction (optionally motion compensated), or
//! driven by the attention-control paired-data generator.

pub mod datagen;
pub mod denoiser;
pub mod embed;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod lvsc;
pub mod palette;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod vten;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use schedule::{NoiseSchedule, TimestepPlan};
pub use tensor::{Dims, Image, VideoLatent};
