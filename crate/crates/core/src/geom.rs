//! Rigid-body geometry: quaternions, rotations, poses, Euler conversions.
//!
//! Conventions, fixed once here and relied on everywhere else:
//!
//! * Navigation frame is local-level ENU (x East, y North, z Up).
//! * Body frame is x forward, y left, z up.
//! * Quaternions are Hamilton, scalar-first, and rotate body vectors into the
//!   navigation frame (`v_nav = q * v_body`). nalgebra's `UnitQuaternion`
//!   follows exactly this product convention, so it is used directly.
//! * Euler angles are intrinsic Z-Y-X (yaw about z, then pitch about the new
//!   y, then roll about the newest x): `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
//!   The identity rotation decomposes to all-zero angles.
//! * The vehicle azimuth used by the odometer projection is a *different*
//!   angle (measured clockwise from North); see
//!   [`crate::fusion::heading_pitch`] for the mapping.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::scalar::Real;

/// Geometry errors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    /// Euler decomposition is unusable because pitch is within the guard band
    /// of ±90°, where yaw and roll become indistinguishable.
    #[error("gimbal lock: |pitch| = {pitch_deg:.4} deg is within the guard band of 90 deg")]
    GimbalLock { pitch_deg: f64 },
}

/// Guard band around |pitch| = 90° where [`EulerZYX::from_rotation`] refuses
/// to decompose (radians).
pub const GIMBAL_GUARD: f64 = 1e-3;

/// Skew-symmetric cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew<R: Real>(v: &Vector3<R>) -> Matrix3<R> {
    let z = R::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Attitude increment quaternion for a body rate `omega` held over `dt`.
///
/// This is the exact exponential map of the rotation vector `omega * dt`
/// (half-angle construction), not a small-angle approximation, so it stays
/// valid for arbitrarily large per-step rotations.
pub fn quat_increment<R: Real>(omega: &Vector3<R>, dt: R) -> UnitQuaternion<R> {
    UnitQuaternion::from_scaled_axis(omega * dt)
}

/// Intrinsic Z-Y-X Euler angles (radians): `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerZYX<R: Real> {
    pub yaw: R,
    pub pitch: R,
    pub roll: R,
}

impl<R: Real> EulerZYX<R> {
    pub fn new(yaw: R, pitch: R, roll: R) -> Self {
        Self { yaw, pitch, roll }
    }

    /// Builds the rotation `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn to_rotation(&self) -> Rotation3<R> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    /// Extracts Z-Y-X angles from a rotation.
    ///
    /// Fails with [`GeomError::GimbalLock`] when |pitch| is within
    /// [`GIMBAL_GUARD`] of 90°; everywhere else the recomposition
    /// `euler.to_rotation()` reproduces the input to machine precision.
    pub fn from_rotation(rotation: &Rotation3<R>) -> Result<Self, GeomError> {
        let m = rotation.matrix();
        // R = Rz*Ry*Rx has m20 = -sin(pitch).
        let sp = -m[(2, 0)];
        let sp = sp.clamp(-R::one(), R::one());
        let pitch = sp.asin();
        let guard = R::frac_pi_2() - R::c(GIMBAL_GUARD);
        if pitch.abs() >= guard {
            return Err(GeomError::GimbalLock {
                pitch_deg: pitch.as_f64().to_degrees(),
            });
        }
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        Ok(Self { yaw, pitch, roll })
    }
}

/// Rigid transform: rotation followed by translation (`p' = R p + t`).
///
/// Used both for vehicle poses (body -> local-level) and for registration
/// corrections applied on the left of a pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<R: Real> {
    pub rotation: Rotation3<R>,
    pub translation: Vector3<R>,
}

impl<R: Real> Pose<R> {
    pub fn new(rotation: Rotation3<R>, translation: Vector3<R>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<R>, translation: Vector3<R>) -> Self {
        Self {
            rotation: q.to_rotation_matrix(),
            translation,
        }
    }

    pub fn rotation_quaternion(&self) -> UnitQuaternion<R> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    /// Applies the transform to a point.
    pub fn apply(&self, p: &Vector3<R>) -> Vector3<R> {
        self.rotation * p + self.translation
    }

    /// Composition `self ∘ other` (apply `other` first, then `self`).
    pub fn compose(&self, other: &Pose<R>) -> Pose<R> {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose<R> {
        let inv_rot = self.rotation.inverse();
        Pose {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    /// 4x4 homogeneous matrix form.
    pub fn to_homogeneous(&self) -> Matrix4<R> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Splits the pose into Z-Y-X Euler angles and the translation.
    pub fn decompose(&self) -> Result<(EulerZYX<R>, Vector3<R>), GeomError> {
        Ok((EulerZYX::from_rotation(&self.rotation)?, self.translation))
    }

    /// Builds the vertical-DOF partial transform `(Δz, Δpitch, Δroll)`:
    /// translation `(0, 0, Δz)` and rotation `Ry(Δpitch) * Rx(Δroll)`.
    ///
    /// By construction the yaw and horizontal translation of the result
    /// decompose to exactly zero.
    pub fn vertical(dz: R, pitch: R, roll: R) -> Self {
        Pose {
            rotation: Rotation3::from_euler_angles(roll, pitch, R::zero()),
            translation: Vector3::new(R::zero(), R::zero(), dz),
        }
    }

    /// Builds the horizontal-DOF partial transform `(Δx, Δy, Δyaw)`:
    /// translation `(Δx, Δy, 0)` and rotation `Rz(Δyaw)`.
    ///
    /// By construction the pitch, roll, and vertical translation of the
    /// result decompose to exactly zero.
    pub fn horizontal(dx: R, dy: R, yaw: R) -> Self {
        Pose {
            rotation: Rotation3::from_euler_angles(R::zero(), R::zero(), yaw),
            translation: Vector3::new(dx, dy, R::zero()),
        }
    }

    /// Largest deviation of `R^T R` from the identity; small for any pose
    /// produced by this crate.
    pub fn orthonormality_error(&self) -> R {
        let m = self.rotation.matrix();
        let e = m.transpose() * m - Matrix3::identity();
        e.abs().max()
    }
}

impl<R: Real> std::ops::Mul for Pose<R> {
    type Output = Pose<R>;

    fn mul(self, rhs: Pose<R>) -> Pose<R> {
        self.compose(&rhs)
    }
}
