//! Crate-wide error type.

use crate::se3::Frame;

/// Errors raised across the crate. Most numerical code is infallible by
/// construction; errors concentrate at frame checks, shape checks and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two poses were composed whose frame tags do not chain.
    #[error("frame mismatch: left is {left_parent:?}->{left_child:?}, right is {right_parent:?}->{right_child:?}")]
    FrameMismatch {
        left_parent: Frame,
        left_child: Frame,
        right_parent: Frame,
        right_child: Frame,
    },

    /// A rotation matrix failed the orthonormality check.
    #[error("matrix is not a rotation (orthonormality error {err:.3e} exceeds {tol:.1e})")]
    NotARotation { err: f64, tol: f64 },

    /// The two direction vectors of a 6-D rotation encoding are (nearly) colinear.
    #[error("rotation 6-vector is degenerate (angle between columns {angle:.3e} rad)")]
    ColinearRot6d { angle: f64 },

    /// Tensor/layer shape mismatch inside the network stack.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Invalid model / task / training configuration.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The scripted expert could not solve the task.
    #[error("scripted expert failed: {0}")]
    ExpertFailure(String),

    /// A policy variant required patches the dataset does not carry.
    #[error("dataset has no RGBD patches but variant {0} requires them")]
    MissingPatches(String),

    /// Malformed episode / checkpoint / manifest file.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
