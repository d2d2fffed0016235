//! Relative-pose diffusion policies for precise peg-in-hole insertion.
//!
//! The crate is organized around a small set of subsystems:
//!
//! - [`se3`]: rigid-transform algebra with runtime frame checking, the R6D
//!   rotation encoding, and the observation-to-command transform chain used
//!   during closed-loop control.
//! - [`net`]: minimal differentiable layer kernels (dense, layer norm,
//!   activations, 2-D convolution, single-head attention) with analytic
//!   gradients, an AdamW optimizer and a finite-difference gradient checker.
//! - [`pose_encoder`]: the disentangled pose encoder (separate translation
//!   and rotation branches joined by self-attention) and its plain-MLP
//!   ablation.
//! - [`rgbd`]: bounding-box / patch utilities and the goal-conditioned RGBD
//!   patch encoder.
//! - [`fusion`]: pose-guided residual gated fusion of pose and image
//!   features, plus the concatenation ablation.
//! - [`diffusion`]: noise schedules, the FiLM-conditioned temporal
//!   convolutional denoiser, training loss and deterministic DDIM sampling.
//! - [`sim`]: a deterministic quasi-static insertion simulator with a
//!   scripted expert, pose-noise injection and synthetic RGBD rendering.
//! - [`data`]: episode files, dataset manifests and action normalization.
//! - [`harness`]: demonstration collection, training, closed-loop
//!   evaluation and trace export.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod net;
pub mod pose_encoder;
pub mod rgbd;
pub mod se3;
pub mod seeding;
pub mod sim;

pub use error::{Error, Result};
