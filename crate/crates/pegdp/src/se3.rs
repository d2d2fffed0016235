//! SE(3) pose algebra with runtime frame checking.
//!
//! Poses carry an ordered `(parent, child)` frame tag and composition is only
//! defined when the tags chain. The long observation-to-command transform
//! chains used in closed-loop control are exactly where silent frame bugs
//! hide, so the checks stay on in release builds.
//!
//! Translations are in millimeters throughout. Rotations are stored as 3x3
//! matrices; the 6-D encoding ([`Rot6d`]) keeps the first two columns and
//! reconstructs the full matrix by Gram-Schmidt plus a cross product.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Coordinate frames of the insertion scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    /// Camera optical frame.
    Camera,
    /// Robot base frame.
    Base,
    /// Grasped (source) object frame, origin at the peg tip.
    Source,
    /// Target object frame, origin at the hole mouth center.
    Target,
    /// End-effector (gripper) frame.
    EndEffector,
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Frame::Camera => "c",
            Frame::Base => "b",
            Frame::Source => "s",
            Frame::Target => "t",
            Frame::EndEffector => "e",
        };
        f.write_str(s)
    }
}

/// Tolerance for accepting a rotation matrix at construction.
pub const ROT_TOL: f64 = 1e-9;
/// Drift threshold beyond which composition re-orthonormalizes its result.
pub const DRIFT_TOL: f64 = 1e-12;

/// A rigid transform mapping child-frame coordinates into the parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    parent: Frame,
    child: Frame,
}

/// Max-abs deviation of `R^T R` from the identity, plus determinant error.
fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r;
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((gram[(i, j)] - target).abs());
        }
    }
    err.max((r.determinant() - 1.0).abs())
}

/// Project a near-rotation onto SO(3) via SVD (closest rotation in Frobenius norm).
fn project_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut rot = u * v_t;
    if rot.determinant() < 0.0 {
        // Flip the singular direction with the smallest singular value.
        let mut u_fixed = u;
        for i in 0..3 {
            u_fixed[(i, 2)] = -u_fixed[(i, 2)];
        }
        rot = u_fixed * v_t;
    }
    rot
}

impl Pose {
    /// Build a pose, validating the rotation to [`ROT_TOL`].
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        parent: Frame,
        child: Frame,
    ) -> Result<Self> {
        let err = orthonormality_error(&rotation);
        if err > ROT_TOL {
            return Err(Error::NotARotation { err, tol: ROT_TOL });
        }
        Ok(Self {
            rotation,
            translation,
            parent,
            child,
        })
    }

    /// Build a pose from a possibly drifted rotation, projecting onto SO(3) first.
    pub fn new_projected(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        parent: Frame,
        child: Frame,
    ) -> Result<Self> {
        let fixed = if orthonormality_error(&rotation) > DRIFT_TOL {
            project_rotation(&rotation)
        } else {
            rotation
        };
        Self::new(fixed, translation, parent, child)
    }

    /// Identity transform between two frames.
    pub fn identity(parent: Frame, child: Frame) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            parent,
            child,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn parent(&self) -> Frame {
        self.parent
    }

    pub fn child(&self) -> Frame {
        self.child
    }

    /// Re-tag the pose without touching the transform. Useful when a noisy
    /// estimate stands in for the true pose of the same frame pair, or when
    /// the simulator constructs poses generically.
    pub fn with_frames(mut self, parent: Frame, child: Frame) -> Self {
        self.parent = parent;
        self.child = child;
        self
    }

    /// Apply the transform to a point in child-frame coordinates.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// 4x4 homogeneous matrix (row-major semantics as printed).
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Serialize as 12 numbers: 9 rotation entries row-major, then translation.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    /// Inverse of [`Pose::to_row_major`].
    pub fn from_row_major(v: &[f64; 12], parent: Frame, child: Frame) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        let translation = Vector3::new(v[9], v[10], v[11]);
        Self::new(rotation, translation, parent, child)
    }
}

/// Compose two poses: `a` maps Y->X, `b` maps Z->Y, result maps Z->X.
///
/// The frame tags must chain (`a.child == b.parent`). If accumulated
/// floating-point drift pushes the product rotation off SO(3) by more than
/// [`DRIFT_TOL`], the result is re-orthonormalized by SVD projection.
pub fn compose(a: &Pose, b: &Pose) -> Result<Pose> {
    if a.child != b.parent {
        return Err(Error::FrameMismatch {
            left_parent: a.parent,
            left_child: a.child,
            right_parent: b.parent,
            right_child: b.child,
        });
    }
    let mut rotation = a.rotation * b.rotation;
    if orthonormality_error(&rotation) > DRIFT_TOL {
        rotation = project_rotation(&rotation);
    }
    let translation = a.rotation * b.translation + a.translation;
    Ok(Pose {
        rotation,
        translation,
        parent: a.parent,
        child: b.child,
    })
}

/// Invert a pose; the frame tag flips.
pub fn inverse(a: &Pose) -> Pose {
    let rotation = a.rotation.transpose();
    let translation = -(rotation * a.translation);
    Pose {
        rotation,
        translation,
        parent: a.child,
        child: a.parent,
    }
}

/// Relative pose of `b`'s child expressed in `a`'s child frame.
///
/// Both inputs must share a parent frame (typically the camera):
/// `relative_pose(T_c_t, T_c_s) = (T_c_t)^-1 * T_c_s`, tagged `t -> s`.
pub fn relative_pose(t_c_t: &Pose, t_c_s: &Pose) -> Result<Pose> {
    if t_c_t.parent != t_c_s.parent {
        return Err(Error::FrameMismatch {
            left_parent: t_c_t.parent,
            left_child: t_c_t.child,
            right_parent: t_c_s.parent,
            right_child: t_c_s.child,
        });
    }
    compose(&inverse(t_c_t), t_c_s)
}

/// 6-D rotation encoding: the first two columns of a rotation matrix,
/// column-major (`[r00, r10, r20, r01, r11, r21]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6d(pub [f64; 6]);

/// Angular separation threshold below which reconstruction is rejected.
const COLINEAR_TOL: f64 = 1e-6;

/// Encode a rotation matrix as its first two columns.
///
/// Inputs more than `1e-6` away from orthonormal are rejected.
pub fn rot_to_r6d(r: &Matrix3<f64>) -> Result<Rot6d> {
    let err = orthonormality_error(r);
    if err > 1e-6 {
        return Err(Error::NotARotation { err, tol: 1e-6 });
    }
    Ok(Rot6d([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]))
}

/// Reconstruct a rotation matrix from its 6-D encoding.
///
/// Gram-Schmidt orthonormalizes the two column vectors; the third column is
/// their cross product, so the determinant is +1 by construction. Colinear
/// (or zero) inputs are rejected.
pub fn r6d_to_rot(r: &Rot6d) -> Result<Matrix3<f64>> {
    let a = Vector3::new(r.0[0], r.0[1], r.0[2]);
    let b = Vector3::new(r.0[3], r.0[4], r.0[5]);
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ColinearRot6d { angle: 0.0 });
    }
    let sin_angle = (a.cross(&b)).norm() / (na * nb);
    if sin_angle < COLINEAR_TOL {
        return Err(Error::ColinearRot6d { angle: sin_angle });
    }
    let e1 = a / na;
    let u = b - e1 * e1.dot(&b);
    let e2 = u / u.norm();
    let e3 = e1.cross(&e2);
    Ok(Matrix3::from_columns(&[e1, e2, e3]))
}

/// Pose action as a 9-vector: normalized translation plus R6D rotation.
///
/// Translation units depend on the normalization applied upstream; the
/// rotation part is always the raw two-column encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionVec9 {
    pub t: [f64; 3],
    pub r6: Rot6d,
}

impl ActionVec9 {
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.t[0], self.t[1], self.t[2], self.r6.0[0], self.r6.0[1], self.r6.0[2],
            self.r6.0[3], self.r6.0[4], self.r6.0[5],
        ]
    }

    pub fn from_array(v: &[f64; 9]) -> Self {
        Self {
            t: [v[0], v[1], v[2]],
            r6: Rot6d([v[3], v[4], v[5], v[6], v[7], v[8]]),
        }
    }

    /// Decode the rotation part into a full matrix.
    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        r6d_to_rot(&self.r6)
    }

    /// Re-encode after one Gram-Schmidt pass; a second application is the identity.
    pub fn renormalized(&self) -> Result<Self> {
        let rot = r6d_to_rot(&self.r6)?;
        Ok(Self {
            t: self.t,
            r6: rot_to_r6d(&rot).expect("reconstructed rotation is orthonormal"),
        })
    }
}

/// Map a predicted relative-pose trajectory into end-effector commands.
///
/// Implements the closed-loop transform chain: the grasp transform
/// `T_s^e = (T_b^c * T_c^s)^-1 * T_b^e` is recomputed from the current
/// observation on every call, then each predicted step becomes
/// `T_b^e_k = T_b^c * T_c^t * pred_k * T_s^e`.
///
/// A useful consequence: if `pred[0]` equals the current relative pose, the
/// first output equals the current end-effector pose regardless of errors in
/// `t_b_c` — the chain cancels the camera extrinsic at the current step.
pub fn end_effector_trajectory(
    t_b_e: &Pose,
    t_b_c: &Pose,
    t_c_s: &Pose,
    t_c_t: &Pose,
    pred: &[Pose],
    horizon: usize,
) -> Result<Vec<Pose>> {
    check_tag(t_b_e, Frame::Base, Frame::EndEffector)?;
    check_tag(t_b_c, Frame::Base, Frame::Camera)?;
    check_tag(t_c_s, Frame::Camera, Frame::Source)?;
    check_tag(t_c_t, Frame::Camera, Frame::Target)?;
    if pred.len() != horizon {
        return Err(Error::InvalidConfig(format!(
            "predicted trajectory has {} steps, expected horizon {}",
            pred.len(),
            horizon
        )));
    }
    let t_b_s = compose(t_b_c, t_c_s)?;
    let t_s_e = compose(&inverse(&t_b_s), t_b_e)?;
    let t_b_t = compose(t_b_c, t_c_t)?;
    let mut out = Vec::with_capacity(pred.len());
    for step in pred {
        check_tag(step, Frame::Target, Frame::Source)?;
        let t_b_s_k = compose(&t_b_t, step)?;
        out.push(compose(&t_b_s_k, &t_s_e)?);
    }
    Ok(out)
}

fn check_tag(p: &Pose, parent: Frame, child: Frame) -> Result<()> {
    if p.parent != parent || p.child != child {
        return Err(Error::FrameMismatch {
            left_parent: parent,
            left_child: child,
            right_parent: p.parent,
            right_child: p.child,
        });
    }
    Ok(())
}

/// Rotation about the z axis.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation about an arbitrary axis (Rodrigues).
pub fn rot_axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    let k = axis / n;
    let kx = Matrix3::new(0.0, -k[2], k[1], k[2], 0.0, -k[0], -k[1], k[0], 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Planar yaw of a rotation (angle of the rotated x axis projected on xy).
pub fn yaw_of(r: &Matrix3<f64>) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
        // Uniform-ish rotation from a random axis and angle; exactness of the
        // distribution does not matter for these tests.
        let axis = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let angle: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        rot_axis_angle(&axis, angle)
    }

    fn random_pose<R: Rng>(rng: &mut R, parent: Frame, child: Frame) -> Pose {
        let t = Vector3::new(
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
        );
        Pose::new_projected(random_rotation(rng), t, parent, child).unwrap()
    }

    fn max_abs_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((a[(i, j)] - b[(i, j)]).abs());
            }
        }
        m
    }

    #[test]
    fn compose_identity_left() {
        let mut rng = crate::seeding::rng_for(1, "se3/id");
        let t = random_pose(&mut rng, Frame::Camera, Frame::Source);
        let id = Pose::identity(Frame::Camera, Frame::Camera);
        let got = compose(&id, &t).unwrap();
        assert_eq!(got.rotation(), t.rotation());
        assert_eq!(got.translation(), t.translation());
    }

    #[test]
    fn compose_pure_translation() {
        let a = Pose::new(
            Matrix3::identity(),
            Vector3::new(1.0, 0.0, 0.0),
            Frame::Base,
            Frame::Camera,
        )
        .unwrap();
        let b = Pose::new(
            Matrix3::identity(),
            Vector3::new(2.0, 0.0, 0.0),
            Frame::Camera,
            Frame::Source,
        )
        .unwrap();
        let c = compose(&a, &b).unwrap();
        assert_eq!(c.translation(), &Vector3::new(3.0, 0.0, 0.0));
        assert_eq!(c.parent(), Frame::Base);
        assert_eq!(c.child(), Frame::Source);
    }

    #[test]
    fn compose_rotation_translation_case() {
        // (Rz90, t=(1,0,0)) o (I, t=(1,0,0)) -> (Rz90, t=(1,1,0))
        let a = Pose::new(
            rot_z(std::f64::consts::FRAC_PI_2),
            Vector3::new(1.0, 0.0, 0.0),
            Frame::Base,
            Frame::Camera,
        )
        .unwrap();
        let b = Pose::new(
            Matrix3::identity(),
            Vector3::new(1.0, 0.0, 0.0),
            Frame::Camera,
            Frame::Source,
        )
        .unwrap();
        let c = compose(&a, &b).unwrap();
        // Independent oracle: homogeneous 4x4 product.
        let oracle = a.to_homogeneous() * b.to_homogeneous();
        for i in 0..3 {
            assert!((c.translation()[i] - oracle[(i, 3)]).abs() < 1e-12);
        }
        assert!((c.translation()[0] - 1.0).abs() < 1e-12);
        assert!((c.translation()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compose_frame_mismatch_rejected() {
        let a = Pose::identity(Frame::Base, Frame::Camera);
        let b = Pose::identity(Frame::Source, Frame::Target);
        assert!(matches!(
            compose(&a, &b),
            Err(Error::FrameMismatch { .. })
        ));
    }

    #[test]
    fn inverse_identity_and_translation() {
        let id = Pose::identity(Frame::Base, Frame::Base);
        let inv = inverse(&id);
        assert_eq!(inv.translation(), &Vector3::zeros());

        let t = Pose::new(
            Matrix3::identity(),
            Vector3::new(1.0, 2.0, 3.0),
            Frame::Base,
            Frame::Camera,
        )
        .unwrap();
        let ti = inverse(&t);
        assert_eq!(ti.translation(), &Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(ti.parent(), Frame::Camera);
        assert_eq!(ti.child(), Frame::Base);
    }

    #[test]
    fn inverse_rotation_case_matches_matrix_oracle() {
        let p = Pose::new(
            rot_z(std::f64::consts::FRAC_PI_2),
            Vector3::new(1.0, 0.0, 0.0),
            Frame::Base,
            Frame::Camera,
        )
        .unwrap();
        let inv = inverse(&p);
        let oracle = p.to_homogeneous().try_inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((inv.rotation()[(i, j)] - oracle[(i, j)]).abs() < 1e-12);
            }
            assert!((inv.translation()[i] - oracle[(i, 3)]).abs() < 1e-12);
        }
        // Rz(-90) applied to t=(1,0,0) gives (0,1,0).
        assert!((inv.translation()[0] - 0.0).abs() < 1e-12);
        assert!((inv.translation()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_is_two_sided() {
        let mut rng = crate::seeding::rng_for(2, "se3/inv");
        for _ in 0..200 {
            let p = random_pose(&mut rng, Frame::Camera, Frame::Source);
            let left = compose(&inverse(&p), &p).unwrap();
            let right = compose(&p, &inverse(&p)).unwrap();
            assert!(max_abs_diff(left.rotation(), &Matrix3::identity()) < 1e-9);
            assert!(left.translation().norm() < 1e-9);
            assert!(max_abs_diff(right.rotation(), &Matrix3::identity()) < 1e-9);
            assert!(right.translation().norm() < 1e-9);
        }
    }

    #[test]
    fn relative_pose_trivial_cases() {
        let mut rng = crate::seeding::rng_for(3, "se3/rel");
        let t_c_s = random_pose(&mut rng, Frame::Camera, Frame::Source);
        let id_t = Pose::identity(Frame::Camera, Frame::Target);
        let rel = relative_pose(&id_t, &t_c_s).unwrap();
        assert!(max_abs_diff(rel.rotation(), t_c_s.rotation()) < 1e-12);
        assert!((rel.translation() - t_c_s.translation()).norm() < 1e-12);
        assert_eq!(rel.parent(), Frame::Target);
        assert_eq!(rel.child(), Frame::Source);

        // T_c^t == T_c^s: relative pose is the identity.
        let same = t_c_s.with_frames(Frame::Camera, Frame::Target);
        let rel2 = relative_pose(&same, &t_c_s).unwrap();
        assert!(max_abs_diff(rel2.rotation(), &Matrix3::identity()) < 1e-9);
        assert!(rel2.translation().norm() < 1e-9);
    }

    #[test]
    fn relative_pose_translation_difference() {
        let t_c_t = Pose::new(
            Matrix3::identity(),
            Vector3::new(1.0, 0.0, 0.0),
            Frame::Camera,
            Frame::Target,
        )
        .unwrap();
        let t_c_s = Pose::new(
            Matrix3::identity(),
            Vector3::new(3.0, 0.0, 0.0),
            Frame::Camera,
            Frame::Source,
        )
        .unwrap();
        let rel = relative_pose(&t_c_t, &t_c_s).unwrap();
        assert_eq!(rel.translation(), &Vector3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = crate::seeding::rng_for(4, "se3/assoc");
        for _ in 0..200 {
            let a = random_pose(&mut rng, Frame::Base, Frame::Camera);
            let b = random_pose(&mut rng, Frame::Camera, Frame::Target);
            let c = random_pose(&mut rng, Frame::Target, Frame::Source);
            let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
            let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
            assert!(max_abs_diff(left.rotation(), right.rotation()) < 1e-9);
            assert!((left.translation() - right.translation()).norm() < 1e-9);
        }
    }

    #[test]
    fn r6d_trivial_cases() {
        let id = rot_to_r6d(&Matrix3::identity()).unwrap();
        assert_eq!(id.0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

        let rz = rot_z(std::f64::consts::FRAC_PI_2);
        let r6 = rot_to_r6d(&rz).unwrap();
        for (got, want) in r6.0.iter().zip([0.0, 1.0, 0.0, -1.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }

        // Gram-Schmidt removes the parallel component.
        let slanted = r6d_to_rot(&Rot6d([1.0, 0.0, 0.0, 1.0, 1.0, 0.0])).unwrap();
        assert!(max_abs_diff(&slanted, &Matrix3::identity()) < 1e-12);

        // Normalization of scaled columns.
        let scaled = r6d_to_rot(&Rot6d([2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert!(max_abs_diff(&scaled, &Matrix3::identity()) < 1e-12);
    }

    #[test]
    fn r6d_colinear_rejected() {
        assert!(matches!(
            r6d_to_rot(&Rot6d([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])),
            Err(Error::ColinearRot6d { .. })
        ));
        assert!(matches!(
            r6d_to_rot(&Rot6d([0.0; 6])),
            Err(Error::ColinearRot6d { .. })
        ));
    }

    #[test]
    fn r6d_roundtrip_1000_rotations() {
        let mut rng = crate::seeding::rng_for(5, "se3/r6d");
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = r6d_to_rot(&rot_to_r6d(&r).unwrap()).unwrap();
            assert!(max_abs_diff(&r, &back) < 1e-9);
            assert!((back.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn r6d_continuity_under_perturbation() {
        let mut rng = crate::seeding::rng_for(6, "se3/lipschitz");
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            let r6 = rot_to_r6d(&r).unwrap();
            let mut perturbed = r6;
            for v in perturbed.0.iter_mut() {
                *v += rng.gen_range(-1e-6..1e-6);
            }
            let a = r6d_to_rot(&r6).unwrap();
            let b = r6d_to_rot(&perturbed).unwrap();
            let frob = (a - b).norm();
            assert!(frob <= 1e-4, "frobenius change {frob} too large");
        }
    }

    #[test]
    fn canonicalization_invariance() {
        // relative_pose(G*T_c^t, G*T_c^s) == relative_pose(T_c^t, T_c^s)
        let mut rng = crate::seeding::rng_for(7, "se3/canon");
        for _ in 0..200 {
            let t_c_t = random_pose(&mut rng, Frame::Camera, Frame::Target);
            let t_c_s = random_pose(&mut rng, Frame::Camera, Frame::Source);
            let g = random_pose(&mut rng, Frame::Camera, Frame::Camera);
            let base = relative_pose(&t_c_t, &t_c_s).unwrap();
            let moved = relative_pose(
                &compose(&g, &t_c_t).unwrap(),
                &compose(&g, &t_c_s).unwrap(),
            )
            .unwrap();
            assert!(max_abs_diff(base.rotation(), moved.rotation()) < 1e-9);
            assert!((base.translation() - moved.translation()).norm() < 1e-9);
        }
    }

    #[test]
    fn action_vec9_renormalization_is_idempotent() {
        let mut rng = crate::seeding::rng_for(8, "se3/vec9");
        for _ in 0..200 {
            let mut raw = [0.0f64; 9];
            for v in raw.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let a = ActionVec9::from_array(&raw);
            let Ok(once) = a.renormalized() else {
                continue; // colinear draw, skip
            };
            let twice = once.renormalized().unwrap();
            for (x, y) in once.to_array().iter().zip(twice.to_array()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn end_effector_chain_trivial_cases() {
        // All identities in, identity out.
        let id_be = Pose::identity(Frame::Base, Frame::EndEffector);
        let id_bc = Pose::identity(Frame::Base, Frame::Camera);
        let id_cs = Pose::identity(Frame::Camera, Frame::Source);
        let id_ct = Pose::identity(Frame::Camera, Frame::Target);
        let pred = vec![Pose::identity(Frame::Target, Frame::Source)];
        let out = end_effector_trajectory(&id_be, &id_bc, &id_cs, &id_ct, &pred, 1).unwrap();
        assert!(max_abs_diff(out[0].rotation(), &Matrix3::identity()) < 1e-12);
        assert!(out[0].translation().norm() < 1e-12);
    }

    #[test]
    fn end_effector_chain_step0_returns_current_pose() {
        let mut rng = crate::seeding::rng_for(9, "se3/step0");
        for _ in 0..100 {
            let t_b_e = random_pose(&mut rng, Frame::Base, Frame::EndEffector);
            let t_b_c = random_pose(&mut rng, Frame::Base, Frame::Camera);
            let t_c_s = random_pose(&mut rng, Frame::Camera, Frame::Source);
            let t_c_t = random_pose(&mut rng, Frame::Camera, Frame::Target);
            let current_rel = relative_pose(&t_c_t, &t_c_s).unwrap();
            let out =
                end_effector_trajectory(&t_b_e, &t_b_c, &t_c_s, &t_c_t, &[current_rel], 1)
                    .unwrap();
            assert!(max_abs_diff(out[0].rotation(), t_b_e.rotation()) < 1e-9);
            assert!((out[0].translation() - t_b_e.translation()).norm() < 1e-9);
        }
    }

    #[test]
    fn end_effector_chain_matches_homogeneous_oracle() {
        let mut rng = crate::seeding::rng_for(10, "se3/chain");
        for _ in 0..100 {
            let t_b_e = random_pose(&mut rng, Frame::Base, Frame::EndEffector);
            let t_b_c = random_pose(&mut rng, Frame::Base, Frame::Camera);
            let t_c_s = random_pose(&mut rng, Frame::Camera, Frame::Source);
            let t_c_t = random_pose(&mut rng, Frame::Camera, Frame::Target);
            let pred: Vec<Pose> = (0..4)
                .map(|_| random_pose(&mut rng, Frame::Target, Frame::Source))
                .collect();
            let out =
                end_effector_trajectory(&t_b_e, &t_b_c, &t_c_s, &t_c_t, &pred, 4).unwrap();

            // One-shot oracle on raw homogeneous matrices.
            let m_be = t_b_e.to_homogeneous();
            let m_bc = t_b_c.to_homogeneous();
            let m_cs = t_c_s.to_homogeneous();
            let m_ct = t_c_t.to_homogeneous();
            let m_se = (m_bc * m_cs).try_inverse().unwrap() * m_be;
            for (k, step) in pred.iter().enumerate() {
                let oracle = m_bc * m_ct * step.to_homogeneous() * m_se;
                let got = out[k].to_homogeneous();
                let mut diff: f64 = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        diff = diff.max((oracle[(i, j)] - got[(i, j)]).abs());
                    }
                }
                assert!(diff < 1e-9, "chain mismatch {diff}");
            }
        }
    }

    #[test]
    fn end_effector_chain_rejects_bad_tags() {
        let id_be = Pose::identity(Frame::Base, Frame::EndEffector);
        let id_bc = Pose::identity(Frame::Base, Frame::Camera);
        let id_cs = Pose::identity(Frame::Camera, Frame::Source);
        let bad_ct = Pose::identity(Frame::Base, Frame::Target);
        let pred = vec![Pose::identity(Frame::Target, Frame::Source)];
        assert!(end_effector_trajectory(&id_be, &id_bc, &id_cs, &bad_ct, &pred, 1).is_err());
    }

    #[test]
    fn row_major_roundtrip() {
        let mut rng = crate::seeding::rng_for(11, "se3/ser");
        let p = random_pose(&mut rng, Frame::Camera, Frame::Source);
        let v = p.to_row_major();
        let q = Pose::from_row_major(&v, Frame::Camera, Frame::Source).unwrap();
        assert_eq!(p.rotation(), q.rotation());
        assert_eq!(p.translation(), q.translation());
    }

    #[test]
    fn constructor_rejects_non_rotation() {
        let bad = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.1);
        assert!(matches!(
            Pose::new(bad, Vector3::zeros(), Frame::Base, Frame::Camera),
            Err(Error::NotARotation { .. })
        ));
        // new_projected repairs it instead.
        let fixed = Pose::new_projected(bad, Vector3::zeros(), Frame::Base, Frame::Camera);
        assert!(fixed.is_ok());
    }
}
