//! Simulator state and quasi-static contact stepping.
//!
//! Contact is kinematic: commands move the end-effector toward the target
//! pose under per-step motion caps, and the resulting peg pose is projected
//! onto the feasible set. At the hole mouth, descent requires the peg
//! footprint to fit inside the hole; inside the hole, lateral position and
//! yaw are clamped against the walls (passive compliance). Blocking is a
//! state outcome (contact flag), never an error.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;

use crate::error::Result;
use crate::se3::{compose, inverse, rot_z, yaw_of, Frame, Pose};
use crate::sim::task::TaskSpec;

/// How `reset` places the target object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSampling {
    /// Region center, zero yaw (demonstration-collection protocol).
    Fixed,
    /// Uniform in the target region box.
    InRegion,
    /// Chebyshev ring 1.5x..2x the region half-extent outside the box.
    OutOfDistribution,
}

/// Ring bounds for out-of-distribution target sampling, as multiples of the
/// region half-extent.
pub const OOD_RING: (f64, f64) = (1.5, 2.0);

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// Target object pose in the base frame (fixed per episode).
    pub t_b_t: Pose,
    /// Current end-effector pose.
    pub t_b_e: Pose,
    /// Grasp transform: source object expressed in the end-effector frame
    /// (fixed per episode; jittered at reset).
    pub t_e_s: Pose,
    /// Camera extrinsic (fixed).
    pub t_b_c: Pose,
    /// Insertion depth achieved (mm).
    pub depth: f64,
    /// True when the last step was blocked or clamped by contact.
    pub contact: bool,
    pub step: u32,
}

impl SimState {
    /// True source (peg) pose in the base frame.
    pub fn t_b_s(&self) -> Pose {
        compose(&self.t_b_e, &self.t_e_s).expect("frames chain")
    }

    /// True source pose in the camera frame.
    pub fn t_c_s(&self) -> Pose {
        compose(&inverse(&self.t_b_c), &self.t_b_s()).expect("frames chain")
    }

    /// True target pose in the camera frame.
    pub fn t_c_t(&self) -> Pose {
        compose(&inverse(&self.t_b_c), &self.t_b_t).expect("frames chain")
    }

    /// True relative pose of the source in the target frame.
    pub fn t_t_s(&self) -> Pose {
        compose(&inverse(&self.t_b_t), &self.t_b_s()).expect("frames chain")
    }

    /// Peg-tip coordinates and yaw in the target frame.
    pub fn tip_in_target(&self) -> (Vector3<f64>, f64) {
        let rel = self.t_t_s();
        (*rel.translation(), yaw_of(rel.rotation()))
    }
}

/// Camera extrinsic: straight-down camera above the workspace center.
pub fn camera_extrinsic(spec: &TaskSpec) -> Pose {
    let rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    Pose::new(
        rot,
        Vector3::new(0.0, 0.0, spec.camera_height),
        Frame::Base,
        Frame::Camera,
    )
    .expect("valid extrinsic")
}

/// Effective footprint half-extents of the yawed peg (its axis-aligned
/// bounding rectangle in the target frame).
pub fn footprint_half(spec: &TaskSpec, yaw: f64) -> (f64, f64) {
    let c = yaw.cos().abs();
    let s = yaw.sin().abs();
    (
        spec.peg_half_x * c + spec.peg_half_y * s,
        spec.peg_half_x * s + spec.peg_half_y * c,
    )
}

/// Lateral wall margins at a given yaw; negative when the yawed footprint
/// cannot fit at any offset.
pub fn margins(spec: &TaskSpec, yaw: f64) -> (f64, f64) {
    let (ax, ay) = footprint_half(spec, yaw);
    (spec.hole_half_x - ax, spec.hole_half_y - ay)
}

const CONTACT_TOL: f64 = 1e-9;

/// Whether the yawed peg footprint at offset `(x, y)` fits inside the hole.
pub fn contained(spec: &TaskSpec, x: f64, y: f64, yaw: f64) -> bool {
    let (mx, my) = margins(spec, yaw);
    mx >= 0.0 && my >= 0.0 && x.abs() <= mx + CONTACT_TOL && y.abs() <= my + CONTACT_TOL
}

/// Largest |yaw| at which the footprint can fit at all (zero offset).
pub fn max_feasible_yaw(spec: &TaskSpec) -> f64 {
    let feasible = |yaw: f64| {
        let (mx, my) = margins(spec, yaw);
        mx >= 0.0 && my >= 0.0
    };
    if !feasible(0.0) {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = std::f64::consts::FRAC_PI_4;
    if feasible(hi) {
        return hi;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Reset the simulator. All randomness comes from `seed`; identical seeds
/// give identical states.
pub fn reset(spec: &TaskSpec, seed: u64, sampling: TargetSampling) -> Result<SimState> {
    spec.validate()?;
    let mut rng = crate::seeding::rng_for(seed, "sim/reset");

    // Target pose on the table.
    let h = spec.target_region_xy;
    let (tx, ty) = match sampling {
        TargetSampling::Fixed => (0.0, 0.0),
        TargetSampling::InRegion => {
            if h > 0.0 {
                (rng.gen_range(-h..h), rng.gen_range(-h..h))
            } else {
                (0.0, 0.0)
            }
        }
        TargetSampling::OutOfDistribution => {
            // Rejection-sample the Chebyshev ring.
            let (lo, hi) = OOD_RING;
            loop {
                let x = rng.gen_range(-hi * h..hi * h);
                let y = rng.gen_range(-hi * h..hi * h);
                let d = (x.abs() / h).max(y.abs() / h);
                if d >= lo && d <= hi {
                    break (x, y);
                }
            }
        }
    };
    let tyaw = match sampling {
        TargetSampling::Fixed => 0.0,
        _ => {
            if spec.target_region_yaw > 0.0 {
                rng.gen_range(-spec.target_region_yaw..spec.target_region_yaw)
            } else {
                0.0
            }
        }
    };
    let t_b_t = Pose::new(
        rot_z(tyaw),
        Vector3::new(tx, ty, spec.block_height),
        Frame::Base,
        Frame::Target,
    )?;

    // Start pose of the peg tip, relative to the hole.
    let sx = rng.gen_range(-spec.start_offset_xy..spec.start_offset_xy);
    let sy = rng.gen_range(-spec.start_offset_xy..spec.start_offset_xy);
    let sz = rng.gen_range(spec.start_height_min..spec.start_height_max);
    let syaw = rng.gen_range(-spec.start_yaw..spec.start_yaw);
    let rel_start = Pose::new(
        rot_z(syaw),
        Vector3::new(sx, sy, sz),
        Frame::Target,
        Frame::Source,
    )?;
    let t_b_s = compose(&t_b_t, &rel_start)?;

    // Grasp: source in end-effector frame, with a small seeded jitter.
    let jt = spec.grasp_jitter_t;
    let (jx, jy) = if jt > 0.0 {
        (rng.gen_range(-jt..jt), rng.gen_range(-jt..jt))
    } else {
        (0.0, 0.0)
    };
    let jyaw = if spec.grasp_jitter_yaw > 0.0 {
        rng.gen_range(-spec.grasp_jitter_yaw..spec.grasp_jitter_yaw)
    } else {
        0.0
    };
    let grip_above = 12.0;
    let t_e_s = Pose::new(
        rot_z(jyaw),
        Vector3::new(jx, jy, -(spec.peg_len + grip_above)),
        Frame::EndEffector,
        Frame::Source,
    )?;

    let t_b_e = compose(&t_b_s, &inverse(&t_e_s))?;
    Ok(SimState {
        t_b_t,
        t_b_e,
        t_e_s,
        t_b_c: camera_extrinsic(spec),
        depth: 0.0,
        contact: false,
        step: 0,
    })
}

/// Floor height (target frame z) under the peg tip at `(x, y, yaw)`.
fn floor_z(spec: &TaskSpec, x: f64, y: f64, yaw: f64) -> f64 {
    if contained(spec, x, y, yaw) {
        return -spec.hole_depth;
    }
    // Over the block (footprint overlap with the block rectangle)?
    let (ax, ay) = footprint_half(spec, yaw);
    if x.abs() <= spec.block_half + ax && y.abs() <= spec.block_half + ay {
        0.0
    } else {
        -spec.block_height
    }
}

/// Advance one control step toward a commanded end-effector pose.
pub fn step(state: &mut SimState, spec: &TaskSpec, command: &Pose) -> Result<()> {
    // Rate-limit the end-effector motion.
    let cur = state.t_b_e;
    let dt = command.translation() - cur.translation();
    let dist = dt.norm();
    let frac_t = if dist > spec.max_step_t {
        spec.max_step_t / dist
    } else {
        1.0
    };
    let q_cur = UnitQuaternion::from_matrix(cur.rotation());
    let q_cmd = UnitQuaternion::from_matrix(command.rotation());
    let delta = q_cur.inverse() * q_cmd;
    let axis_angle = delta.scaled_axis();
    let angle = axis_angle.norm();
    let frac_r = if angle > spec.max_step_r {
        spec.max_step_r / angle
    } else {
        1.0
    };
    let frac = frac_t.min(frac_r);
    let q_new = q_cur * UnitQuaternion::from_scaled_axis(axis_angle * frac);
    let reached = Pose::new_projected(
        *q_new.to_rotation_matrix().matrix(),
        cur.translation() + dt * frac,
        Frame::Base,
        Frame::EndEffector,
    )?;

    // Desired peg pose in the target frame.
    let des = compose(&inverse(&state.t_b_t), &compose(&reached, &state.t_e_s)?)?;
    let (dx, dy, dz) = {
        let t = des.translation();
        (t[0], t[1], t[2])
    };
    let dyaw = yaw_of(des.rotation());
    let (cur_rel, _) = state.tip_in_target();
    let z_cur = cur_rel[2];

    let mut nx = dx;
    let mut ny = dy;
    let mut nz = dz;
    let mut nyaw = dyaw;
    let mut contact = false;

    if z_cur < 0.0 && dz < 0.0 {
        // Inside the hole and staying inside: clamp yaw and laterals to the
        // walls (passive compliance), and the depth to the hole bottom.
        let yaw_max = max_feasible_yaw(spec);
        if nyaw.abs() > yaw_max {
            nyaw = nyaw.clamp(-yaw_max, yaw_max);
            contact = true;
        }
        let (mx, my) = margins(spec, nyaw);
        let mx = mx.max(0.0);
        let my = my.max(0.0);
        if nx.abs() > mx {
            nx = nx.clamp(-mx, mx);
            contact = true;
        }
        if ny.abs() > my {
            ny = ny.clamp(-my, my);
            contact = true;
        }
        if nz < -spec.hole_depth {
            nz = -spec.hole_depth;
            contact = true;
        }
    } else if dz < 0.0 {
        // Crossing the mouth plane from above: insertion happens only if the
        // footprint fits; otherwise the peg rests on whatever is below.
        if contained(spec, nx, ny, nyaw) {
            if nz < -spec.hole_depth {
                nz = -spec.hole_depth;
                contact = true;
            }
        } else {
            let floor = floor_z(spec, nx, ny, nyaw);
            if nz < floor {
                nz = floor;
                contact = true;
            }
        }
    }
    // Above the mouth plane (dz >= 0): free motion.

    // Rebuild the end-effector pose from the resolved peg pose. The yaw
    // correction is applied in the target frame, preserving any tilt.
    let yaw_fix = nyaw - dyaw;
    let new_rot = if yaw_fix != 0.0 {
        rot_z(yaw_fix) * des.rotation()
    } else {
        *des.rotation()
    };
    let rel_new = Pose::new_projected(
        new_rot,
        Vector3::new(nx, ny, nz),
        Frame::Target,
        Frame::Source,
    )?;
    let t_b_s_new = compose(&state.t_b_t, &rel_new)?;
    state.t_b_e = compose(&t_b_s_new, &inverse(&state.t_e_s))?;
    state.depth = if nz < 0.0 && contained(spec, nx, ny, nyaw) {
        -nz
    } else {
        0.0
    };
    state.contact = contact;
    state.step += 1;
    Ok(())
}

/// Success: nearly full insertion with the tip laterally inside the
/// clearance band.
pub fn success(state: &SimState, spec: &TaskSpec) -> bool {
    let (tip, _) = state.tip_in_target();
    let lateral = tip[0].abs().max(tip[1].abs());
    state.depth >= 0.95 * spec.hole_depth && lateral < spec.clearance()
}

/// Convenience: command expressed as a desired peg pose in the target frame.
pub fn command_from_relative(state: &SimState, rel: &Pose) -> Pose {
    let t_b_s = compose(&state.t_b_t, rel).expect("frames chain");
    compose(&t_b_s, &inverse(&state.t_e_s)).expect("frames chain")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_state(spec: &TaskSpec, z: f64) -> SimState {
        let mut state = reset(spec, 1, TargetSampling::Fixed).unwrap();
        let rel = Pose::new(
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, z),
            Frame::Target,
            Frame::Source,
        )
        .unwrap();
        state.t_b_e = command_from_relative(&state, &rel);
        state
    }

    fn step_relative(state: &mut SimState, spec: &TaskSpec, x: f64, y: f64, z: f64) {
        let rel = Pose::new(
            Matrix3::identity(),
            Vector3::new(x, y, z),
            Frame::Target,
            Frame::Source,
        )
        .unwrap();
        let cmd = command_from_relative(state, &rel);
        step(state, spec, &cmd).unwrap();
    }

    #[test]
    fn same_seed_same_state() {
        let spec = TaskSpec::easy();
        let a = reset(&spec, 42, TargetSampling::InRegion).unwrap();
        let b = reset(&spec, 42, TargetSampling::InRegion).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_width_region_is_center() {
        let mut spec = TaskSpec::easy();
        spec.target_region_xy = 0.0;
        spec.target_region_yaw = 0.0;
        for seed in 0..5 {
            let s = reset(&spec, seed, TargetSampling::InRegion).unwrap();
            assert_eq!(s.t_b_t.translation()[0], 0.0);
            assert_eq!(s.t_b_t.translation()[1], 0.0);
        }
    }

    #[test]
    fn target_sampling_is_uniformish() {
        // Histogram sanity: 1000 resets, x coordinate into 8 bins.
        let spec = TaskSpec::easy();
        let mut bins = [0usize; 8];
        let n = 1000;
        for seed in 0..n {
            let s = reset(&spec, seed as u64, TargetSampling::InRegion).unwrap();
            let x = s.t_b_t.translation()[0];
            let q = (((x + spec.target_region_xy) / (2.0 * spec.target_region_xy)) * 8.0)
                .floor()
                .clamp(0.0, 7.0) as usize;
            bins[q] += 1;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = bins
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 7 degrees of freedom; 24.3 is the 0.001 quantile. Deterministic
        // seeds make this a fixed number; the bound guards regressions.
        assert!(chi2 < 24.3, "chi2 = {chi2}, bins = {bins:?}");
    }

    #[test]
    fn ood_targets_land_in_ring() {
        let spec = TaskSpec::easy();
        for seed in 0..200 {
            let s = reset(&spec, seed, TargetSampling::OutOfDistribution).unwrap();
            let t = s.t_b_t.translation();
            let d = (t[0].abs() / spec.target_region_xy).max(t[1].abs() / spec.target_region_xy);
            assert!((OOD_RING.0..=OOD_RING.1).contains(&d), "d = {d}");
        }
    }

    #[test]
    fn centered_descent_advances_depth() {
        let spec = TaskSpec::easy();
        let mut state = centered_state(&spec, 1.0);
        step_relative(&mut state, &spec, 0.0, 0.0, -1.0);
        assert!(state.depth > 0.9, "depth = {}", state.depth);
        assert!(!state.contact);
        let before = state.depth;
        step_relative(&mut state, &spec, 0.0, 0.0, -3.0);
        assert!(state.depth > before);
    }

    #[test]
    fn lateral_offset_beyond_clearance_blocks() {
        let spec = TaskSpec::easy();
        let offset = spec.clearance() * 1.5;
        let mut state = centered_state(&spec, 0.5);
        step_relative(&mut state, &spec, offset, 0.0, -1.0);
        assert_eq!(state.depth, 0.0);
        assert!(state.contact);
        let (tip, _) = state.tip_in_target();
        assert!(tip[2] >= 0.0, "peg must rest on the plate, z = {}", tip[2]);
    }

    #[test]
    fn half_clearance_offset_inserts() {
        let spec = TaskSpec::easy();
        let offset = spec.clearance() / 2.0;
        let mut state = centered_state(&spec, 0.5);
        step_relative(&mut state, &spec, offset, 0.0, -1.0);
        assert!(state.depth > 0.0, "containment oracle: offset within margins");
    }

    #[test]
    fn walls_clamp_lateral_motion_inside() {
        let spec = TaskSpec::easy();
        let mut state = centered_state(&spec, 0.5);
        step_relative(&mut state, &spec, 0.0, 0.0, -1.5);
        assert!(state.depth > 0.0);
        // Try to push far sideways while inside.
        step_relative(&mut state, &spec, 2.0, 0.0, -1.5);
        let (tip, yaw) = state.tip_in_target();
        let (mx, _) = margins(&spec, yaw);
        assert!(tip[0].abs() <= mx + 1e-9, "x = {} vs margin {mx}", tip[0]);
        assert!(state.contact);
        assert!(state.depth > 0.0, "still inserted");
    }

    #[test]
    fn depth_never_exceeds_hole_depth() {
        let spec = TaskSpec::easy();
        let mut state = centered_state(&spec, 0.5);
        for _ in 0..10 {
            step_relative(&mut state, &spec, 0.0, 0.0, -10.0);
        }
        assert!(state.depth <= spec.hole_depth + 1e-9);
        assert!((state.depth - spec.hole_depth).abs() < 1e-6);
    }

    #[test]
    fn retraction_reduces_depth() {
        let spec = TaskSpec::easy();
        let mut state = centered_state(&spec, 0.5);
        step_relative(&mut state, &spec, 0.0, 0.0, -2.0);
        let deep = state.depth;
        step_relative(&mut state, &spec, 0.0, 0.0, -0.5);
        assert!(state.depth < deep, "retracting command reduces depth");
    }

    #[test]
    fn success_predicate_edges() {
        let spec = TaskSpec::easy();
        let state = reset(&spec, 3, TargetSampling::Fixed).unwrap();
        assert!(!success(&state, &spec), "reset state is not success");

        let mut deep = centered_state(&spec, 0.5);
        // 0.94 x depth: just below the threshold.
        deep.depth = 0.94 * spec.hole_depth;
        assert!(!success(&deep, &spec));
        // Drive it down for real.
        for _ in 0..8 {
            step_relative(&mut deep, &spec, 0.0, 0.0, -spec.hole_depth);
        }
        assert!(success(&deep, &spec));
    }

    #[test]
    fn yaw_misalignment_blocks_hard_task() {
        let spec = TaskSpec::hard();
        let yaw_max = max_feasible_yaw(&spec);
        assert!(yaw_max < 0.02, "hard task tolerates little yaw: {yaw_max}");
        let mut state = centered_state(&spec, 0.5);
        // Command descent with a clearly infeasible yaw.
        let rel = Pose::new(
            rot_z(0.1),
            Vector3::new(0.0, 0.0, -1.0),
            Frame::Target,
            Frame::Source,
        )
        .unwrap();
        let cmd = command_from_relative(&state, &rel);
        step(&mut state, &spec, &cmd).unwrap();
        assert_eq!(state.depth, 0.0);
        assert!(state.contact);
    }

    #[test]
    fn motion_caps_limit_step_size() {
        let spec = TaskSpec::easy();
        let mut state = centered_state(&spec, 10.0);
        let before = *state.t_b_e.translation();
        step_relative(&mut state, &spec, 30.0, 0.0, 10.0);
        let moved = (state.t_b_e.translation() - before).norm();
        assert!(moved <= spec.max_step_t + 1e-9, "moved {moved}");
    }

    #[test]
    fn determinism_over_command_sequence() {
        let spec = TaskSpec::hard();
        let run = || {
            let mut state = reset(&spec, 9, TargetSampling::InRegion).unwrap();
            for i in 0..40 {
                let rel = Pose::new(
                    rot_z(0.001 * i as f64),
                    Vector3::new(0.1 * (i % 5) as f64, -0.05 * (i % 3) as f64, 8.0 - 0.3 * i as f64),
                    Frame::Target,
                    Frame::Source,
                )
                .unwrap();
                let cmd = command_from_relative(&state, &rel);
                step(&mut state, &spec, &cmd).unwrap();
            }
            state
        };
        assert_eq!(run(), run());
    }
}
