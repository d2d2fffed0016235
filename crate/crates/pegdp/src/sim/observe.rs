//! Noisy observations.
//!
//! Pose-estimation noise is injected on top of the true camera-frame poses:
//! zero-mean Gaussian translation per axis and a random-axis rotation with
//! Gaussian angle, independently per object. Patches are rendered from the
//! noise-free geometry: noise enters the poses only, isolating the variable
//! under study.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::rgbd::{BBox, RgbdPatch};
use crate::se3::{rot_axis_angle, Pose};
use crate::sim::render::render_patch;
use crate::sim::state::SimState;
use crate::sim::task::TaskSpec;

/// One observation: noisy poses, and optionally the rendered patch with the
/// union box it was cropped from.
#[derive(Debug, Clone)]
pub struct NoisyObservation {
    pub t_c_s: Pose,
    pub t_c_t: Pose,
    pub patch: Option<RgbdPatch>,
    pub bbox: BBox,
}

/// Perturb one pose. With both sigmas at zero the pose is returned
/// bit-identical and the RNG is not consumed.
fn perturb<R: Rng>(pose: &Pose, sigma_t: f64, sigma_r: f64, rng: &mut R) -> Pose {
    let mut rotation = *pose.rotation();
    let mut translation = *pose.translation();
    if sigma_t > 0.0 {
        for i in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            translation[i] += sigma_t * n;
        }
    }
    if sigma_r > 0.0 {
        // Uniform random axis, Gaussian angle.
        let axis = loop {
            let v = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let n = v.norm();
            if n > 1e-12 {
                break v / n;
            }
        };
        let angle: f64 = sigma_r * rng.sample::<f64, _>(StandardNormal);
        rotation *= rot_axis_angle(&axis, angle);
    }
    Pose::new_projected(rotation, translation, pose.parent(), pose.child())
        .expect("perturbed rotation stays orthonormal")
}

/// Observe the scene. Draw order is fixed (source pose first, then target),
/// so a given RNG state yields one exact observation.
pub fn observe<R: Rng>(
    state: &SimState,
    spec: &TaskSpec,
    rng: &mut R,
    with_patch: bool,
) -> Result<NoisyObservation> {
    let t_c_s = perturb(
        &state.t_c_s(),
        spec.source_sigma_t,
        spec.source_sigma_r,
        rng,
    );
    let t_c_t = perturb(
        &state.t_c_t(),
        spec.target_sigma_t,
        spec.target_sigma_r,
        rng,
    );
    let (patch, bbox) = if with_patch {
        let (p, b) = render_patch(state, spec)?;
        (Some(p), b)
    } else {
        (None, BBox::new(0.0, 0.0, 0.0, 0.0))
    };
    Ok(NoisyObservation {
        t_c_s,
        t_c_t,
        patch,
        bbox,
    })
}
