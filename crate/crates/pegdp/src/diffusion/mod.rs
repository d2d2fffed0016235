//! Conditional denoising diffusion over action chunks.
//!
//! [`schedule`] holds the noise schedules and the forward noising step,
//! [`denoiser`] the FiLM-conditioned temporal convolutional network, and
//! [`policy`] ties encoders, denoiser and DDIM sampling into the trainable
//! policy variants.

pub mod denoiser;
pub mod policy;
pub mod schedule;

pub use denoiser::{Denoiser, DenoiserConfig};
pub use policy::{Policy, PolicyConfig, Variant};
pub use schedule::{add_noise, add_noise_affine, make_schedule, NoiseSchedule, ScheduleKind};
