//! Shared geometric types: attitude, IMU samples, camera intrinsics,
//! rigid transforms and planar similarity (SIM(2)) poses.
//!
//! Everything here is a plain immutable value; no pipeline logic.

use nalgebra::{Matrix3, Vector2, Vector3};

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Vehicle attitude: pitch and roll in radians. Yaw is intentionally absent;
/// heading is recovered photometrically downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attitude {
    pub pitch: f64,
    pub roll: f64,
}

impl Attitude {
    pub fn new(pitch: f64, roll: f64) -> Self {
        Self { pitch, roll }
    }

    pub fn zero() -> Self {
        Self { pitch: 0.0, roll: 0.0 }
    }

    /// Pitch must lie in `(-pi/2, pi/2)`, roll in `(-pi, pi]`, both finite.
    pub fn is_valid(&self) -> bool {
        self.pitch.is_finite()
            && self.roll.is_finite()
            && self.pitch.abs() < std::f64::consts::FRAC_PI_2
            && self.roll > -std::f64::consts::PI
            && self.roll <= std::f64::consts::PI
    }
}

/// One inertial sample: body rates for pitch/roll plus raw 3D acceleration.
#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Pitch rate from the gyroscope, rad/s.
    pub gyro_pitch_rate: f64,
    /// Roll rate from the gyroscope, rad/s.
    pub gyro_roll_rate: f64,
    /// Specific force, m/s^2.
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn is_valid(&self) -> bool {
        self.timestamp.is_finite()
            && self.gyro_pitch_rate.is_finite()
            && self.gyro_roll_rate.is_finite()
            && self.accel.iter().all(|v| v.is_finite())
    }
}

/// Pinhole camera intrinsics.
#[derive(Debug, Clone, Copy)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
    }
}

/// Rigid transform in 3D: `p_out = rotation * p_in + translation`.
#[derive(Debug, Clone, Copy)]
pub struct RigidTransform3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform3 {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Orthonormal within `tol` and `det(R) = 1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let should_be_eye = self.rotation * self.rotation.transpose();
        let err = (should_be_eye - Matrix3::identity()).abs().max();
        err < tol && (self.rotation.determinant() - 1.0).abs() < tol
    }
}

/// Planar similarity: rotation by `theta`, uniform `scale`, then translation.
/// Acting on a point: `p' = scale * R(theta) * p + translation`.
#[derive(Debug, Clone, Copy)]
pub struct Sim2Pose {
    pub theta: f64,
    pub scale: f64,
    pub translation: Vector2<f64>,
}

impl Sim2Pose {
    pub fn identity() -> Self {
        Self { theta: 0.0, scale: 1.0, translation: Vector2::zeros() }
    }

    pub fn new(theta: f64, scale: f64, tx: f64, ty: f64) -> Self {
        Self { theta: wrap_angle(theta), scale, translation: Vector2::new(tx, ty) }
    }

    pub fn is_valid(&self) -> bool {
        self.scale > 0.0
            && self.scale.is_finite()
            && self.theta > -std::f64::consts::PI
            && self.theta <= std::f64::consts::PI
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.scale * rot2(self.theta) * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = rot2(-self.theta);
        Self {
            theta: wrap_angle(-self.theta),
            scale: 1.0 / self.scale,
            translation: -(r_inv * self.translation) / self.scale,
        }
    }
}

/// 2D rotation matrix for `theta` (counter-clockwise in a right-handed basis).
pub fn rot2(theta: f64) -> nalgebra::Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    nalgebra::Matrix2::new(c, -s, s, c)
}

/// IMU-to-world rotation for a given pitch/roll pair.
///
/// Row-wise, with `a` = pitch and `b` = roll:
/// ```text
/// [  cos b            sin b            0     ]
/// [ -cos a sin b      cos a cos b      sin a ]
/// [  sin a sin b     -sin a cos b      cos a ]
/// ```
pub fn rotation_from_attitude(att: &Attitude) -> Matrix3<f64> {
    let (sa, ca) = att.pitch.sin_cos();
    let (sb, cb) = att.roll.sin_cos();
    Matrix3::new(
        cb, sb, 0.0, //
        -ca * sb, ca * cb, sa, //
        sa * sb, -sa * cb, ca,
    )
}

/// Partial derivative of [`rotation_from_attitude`] with respect to pitch.
pub fn rotation_attitude_dpitch(att: &Attitude) -> Matrix3<f64> {
    let (sa, ca) = att.pitch.sin_cos();
    let (sb, cb) = att.roll.sin_cos();
    Matrix3::new(
        0.0, 0.0, 0.0, //
        sa * sb, -sa * cb, ca, //
        ca * sb, -ca * cb, -sa,
    )
}

/// Partial derivative of [`rotation_from_attitude`] with respect to roll.
pub fn rotation_attitude_droll(att: &Attitude) -> Matrix3<f64> {
    let (sa, ca) = att.pitch.sin_cos();
    let (sb, cb) = att.roll.sin_cos();
    Matrix3::new(
        -sb, cb, 0.0, //
        -ca * cb, -ca * sb, 0.0, //
        sa * cb, sa * sb, 0.0,
    )
}

/// Compose two planar similarities: the result applies `b` first, then `a`.
pub fn compose_sim2(a: &Sim2Pose, b: &Sim2Pose) -> Sim2Pose {
    Sim2Pose {
        theta: wrap_angle(a.theta + b.theta),
        scale: a.scale * b.scale,
        translation: a.scale * rot2(a.theta) * b.translation + a.translation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn rotation_identity_at_zero_attitude() {
        let r = rotation_from_attitude(&Attitude::zero());
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn rotation_at_quarter_roll() {
        let r = rotation_from_attitude(&Attitude::new(0.0, std::f64::consts::FRAC_PI_2));
        let expected = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation_from_attitude(&Attitude::new(0.3, -0.7));
        assert_abs_diff_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn rotation_jacobians_match_finite_differences() {
        let att = Attitude::new(0.21, -0.43);
        let h = 1e-6;
        let num_dp = (rotation_from_attitude(&Attitude::new(att.pitch + h, att.roll))
            - rotation_from_attitude(&Attitude::new(att.pitch - h, att.roll)))
            / (2.0 * h);
        let num_dr = (rotation_from_attitude(&Attitude::new(att.pitch, att.roll + h))
            - rotation_from_attitude(&Attitude::new(att.pitch, att.roll - h)))
            / (2.0 * h);
        assert_abs_diff_eq!(rotation_attitude_dpitch(&att), num_dp, epsilon = 1e-8);
        assert_abs_diff_eq!(rotation_attitude_droll(&att), num_dr, epsilon = 1e-8);
    }

    #[test]
    fn compose_identity_is_neutral() {
        let p = Sim2Pose::new(0.4, 1.2, 3.0, -1.0);
        let q = compose_sim2(&Sim2Pose::identity(), &p);
        assert_abs_diff_eq!(q.theta, p.theta, epsilon = 1e-15);
        assert_abs_diff_eq!(q.scale, p.scale, epsilon = 1e-15);
        assert_abs_diff_eq!(q.translation, p.translation, epsilon = 1e-15);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = Sim2Pose::new(-2.1, 0.8, 1.5, 2.5);
        let q = compose_sim2(&p, &p.inverse());
        assert_abs_diff_eq!(q.theta, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q.scale, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q.translation, Vector2::zeros(), epsilon = 1e-9);
    }

    #[test]
    fn compose_quarter_turn_then_step() {
        // First move one unit forward, then a pose that rotated 90 degrees.
        let a = Sim2Pose::new(std::f64::consts::FRAC_PI_2, 1.0, 1.0, 0.0);
        let b = Sim2Pose::new(0.0, 1.0, 1.0, 0.0);
        let q = compose_sim2(&a, &b);
        assert_abs_diff_eq!(q.theta, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(q.scale, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.translation, Vector2::new(1.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.1), 0.1, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_orthonormal_det_one(
            pitch in -1.5f64..1.5,
            roll in -3.1f64..3.1,
        ) {
            let r = rotation_from_attitude(&Attitude::new(pitch, roll));
            let err = (r * r.transpose() - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn compose_is_associative(
            t1 in -3.0f64..3.0, t2 in -3.0f64..3.0, t3 in -3.0f64..3.0,
            s1 in 0.5f64..2.0, s2 in 0.5f64..2.0, s3 in 0.5f64..2.0,
            x1 in -5.0f64..5.0, y1 in -5.0f64..5.0,
            x2 in -5.0f64..5.0, y2 in -5.0f64..5.0,
            x3 in -5.0f64..5.0, y3 in -5.0f64..5.0,
        ) {
            let a = Sim2Pose::new(t1, s1, x1, y1);
            let b = Sim2Pose::new(t2, s2, x2, y2);
            let c = Sim2Pose::new(t3, s3, x3, y3);
            let left = compose_sim2(&compose_sim2(&a, &b), &c);
            let right = compose_sim2(&a, &compose_sim2(&b, &c));
            prop_assert!(wrap_angle(left.theta - right.theta).abs() < 1e-9);
            prop_assert!((left.scale - right.scale).abs() < 1e-9);
            prop_assert!((left.translation - right.translation).norm() < 1e-9);
        }
    }
}
