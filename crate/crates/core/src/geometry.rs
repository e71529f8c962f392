//! Rigid-body algebra: unit-quaternion rotations, SE(3) poses and
//! time interpolation of stamped poses.
//!
//! Euler angles follow the intrinsic Z-Y-X convention
//! (`R = Rz(yaw) * Ry(pitch) * Rx(roll)`).

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion ({w}, {x}, {y}, {z}) cannot be normalized")]
    InvalidQuaternion { w: f64, x: f64, y: f64, z: f64 },
    #[error("non-finite translation component")]
    NonFiniteTranslation,
    #[error("stamp {0} is not a finite non-negative time")]
    InvalidStamp(f64),
    #[error("interpolation interval [{start}, {end}] is degenerate")]
    DegenerateInterval { start: f64, end: f64 },
    #[error("time {t} outside interpolation interval [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
}

/// A 3D rotation stored as a unit quaternion.
///
/// Equality treats `q` and `-q` as the same rotation.
#[derive(Debug, Clone, Copy)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds a rotation from raw quaternion components, normalizing them.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(GeometryError::InvalidQuaternion { w, x, y, z });
        }
        Ok(Self(UnitQuaternion::from_quaternion(q)))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self(UnitQuaternion::new_normalize(q.into_inner()))
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    /// A zero axis yields the identity.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        match nalgebra::Unit::try_new(*axis, 1e-15) {
            Some(axis) => Self(UnitQuaternion::from_axis_angle(&axis, angle)),
            None => Self::identity(),
        }
    }

    /// Exponential map: rotation vector (axis * angle) to rotation.
    pub fn from_scaled_axis(v: &Vector3<f64>) -> Self {
        Self(UnitQuaternion::from_scaled_axis(*v))
    }

    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    /// Returns `(roll, pitch, yaw)` in radians. Precision degrades as pitch
    /// approaches +-pi/2.
    pub fn to_rpy(&self) -> (f64, f64, f64) {
        self.0.euler_angles()
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        // Robust form: atan2 of the vector and scalar parts, shortest arc.
        let q = self.0.quaternion();
        let v = q.imag().norm();
        2.0 * v.atan2(q.w.abs())
    }

    /// Angle of the rotation taking `self` to `other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    /// Logarithm map: rotation vector with norm in `[0, pi]`.
    pub fn scaled_axis(&self) -> Vector3<f64> {
        let q = if self.0.w < 0.0 {
            UnitQuaternion::new_unchecked(-self.0.into_inner())
        } else {
            self.0
        };
        q.scaled_axis()
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_vector(v)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// Components as `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Spherical interpolation along the shortest arc; `s = 0` gives `self`,
    /// `s = 1` gives `other`.
    pub fn slerp(&self, other: &Rotation, s: f64) -> Rotation {
        let delta = (self.inverse() * *other).scaled_axis();
        *self * Rotation::from_scaled_axis(&(delta * s))
    }

    pub fn is_close(&self, other: &Rotation, tol: f64) -> bool {
        self.angle_to(other) <= tol
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl PartialEq for Rotation {
    fn eq(&self, other: &Self) -> bool {
        let a = self.0.coords;
        let b = other.0.coords;
        a == b || a == -b
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(UnitQuaternion::new_normalize(
            (self.0 * rhs.0).into_inner(),
        ))
    }
}

/// A rigid transform in SE(3): `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Rotation::identity(), Vector3::new(x, y, z))
    }

    pub fn from_rotation(rotation: Rotation) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Pose from `x, y, z, roll, pitch, yaw`.
    pub fn from_xyz_rpy(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::new(Rotation::from_rpy(roll, pitch, yaw), Vector3::new(x, y, z))
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose {
            rotation,
            translation: -rotation.rotate(&self.translation),
        }
    }

    /// The transform from `self` to `other`: `self^-1 * other`.
    pub fn relative(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        (
            (self.translation - other.translation).norm(),
            self.rotation.angle_to(&other.rotation),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.0.coords.iter().all(|v| v.is_finite())
    }

    /// `tx ty tz qx qy qz qw`.
    pub fn to_record(&self) -> [f64; 7] {
        let [w, x, y, z] = self.rotation.wxyz();
        let t = self.translation;
        [t.x, t.y, t.z, x, y, z, w]
    }

    pub fn from_record(r: &[f64; 7]) -> Result<Pose, GeometryError> {
        if !r[..3].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFiniteTranslation);
        }
        let rotation = Rotation::from_quaternion(r[6], r[3], r[4], r[5])?;
        Ok(Pose::new(rotation, Vector3::new(r[0], r[1], r[2])))
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.to_record();
        write!(
            f,
            "{} {} {} {} {} {} {}",
            r[0], r[1], r[2], r[3], r[4], r[5], r[6]
        )
    }
}

/// A pose tagged with a stream time in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub time: f64,
    pub pose: Pose,
}

impl StampedPose {
    pub fn new(time: f64, pose: Pose) -> Result<Self, GeometryError> {
        if !time.is_finite() || time < 0.0 {
            return Err(GeometryError::InvalidStamp(time));
        }
        Ok(Self { time, pose })
    }
}

/// Pose at time `t` between two stamped poses: linear in translation,
/// shortest-arc slerp in rotation. Endpoints are reproduced exactly.
pub fn interpolate(a: &StampedPose, b: &StampedPose, t: f64) -> Result<Pose, GeometryError> {
    if !(a.time < b.time) {
        return Err(GeometryError::DegenerateInterval {
            start: a.time,
            end: b.time,
        });
    }
    if !(a.time <= t && t <= b.time) {
        return Err(GeometryError::OutOfRange {
            t,
            start: a.time,
            end: b.time,
        });
    }
    if t == a.time {
        return Ok(a.pose);
    }
    if t == b.time {
        return Ok(b.pose);
    }
    let s = (t - a.time) / (b.time - a.time);
    Ok(Pose {
        rotation: a.pose.rotation.slerp(&b.pose.rotation, s),
        translation: a.pose.translation.lerp(&b.pose.translation, s),
    })
}
