//! Rigid-body poses on SE(3).
//!
//! Quaternions are stored `(w, x, y, z)` through nalgebra, right-handed,
//! acting as active rotations. `compose(a, b)` is the homogeneous product
//! `T(a) * T(b)` and `between(a, b)` is `T(a)^-1 * T(b)`, the factor-graph
//! convention. Tangent vectors are ordered `(rho, phi)`: translation first,
//! rotation second, matching the g2o information-matrix layout.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Point3, Quaternion, Translation3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

use crate::textfmt::fmt_sig;

/// Rotation angles closer than this to pi have no unique logarithm.
pub const LOG_ANGLE_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("rotation angle {angle} rad is within {LOG_ANGLE_MARGIN} of pi; logarithm is ill-defined")]
    GimbalBoundary { angle: f64 },
    #[error("invalid pose text: {0}")]
    Parse(String),
}

/// An element of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    translation: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
}

/// Tangent-space element of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl Pose {
    /// Builds a pose from a translation and a (not necessarily unit) quaternion.
    pub fn new(translation: Vector3<f64>, rotation: Quaternion<f64>) -> Self {
        Self { translation, rotation: UnitQuaternion::from_quaternion(rotation) }
    }

    pub fn from_parts(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self::new(translation, rotation.into_inner())
    }

    pub fn identity() -> Self {
        Self::from_parts(Vector3::zeros(), UnitQuaternion::identity())
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_parts(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    /// Planar pose at height `z` with heading `yaw` about +z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::from_parts(Vector3::new(x, y, z), UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw))
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    /// Heading of the body x axis projected on the xy plane.
    pub fn yaw(&self) -> f64 {
        let x = self.rotation * Vector3::x();
        x.y.atan2(x.x)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.translation + self.rotation * other.translation, self.rotation.quaternion() * other.rotation.quaternion())
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(-(inv * self.translation), inv.into_inner())
    }

    /// Pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = self.rotation.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_isometry(&self) -> nalgebra::Isometry3<f64> {
        nalgebra::Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// Exponential map, closed form.
    pub fn exp(v: &Twist) -> Pose {
        let theta = v.phi.norm();
        let k = skew(&v.phi);
        let k2 = k * k;
        let (b, c) = if theta < 1e-5 {
            let t2 = theta * theta;
            (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
        } else {
            let t2 = theta * theta;
            ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
        };
        let jac = Matrix3::identity() + k * b + k2 * c;
        let rotation = UnitQuaternion::from_scaled_axis(v.phi);
        Pose::from_parts(jac * v.rho, rotation)
    }

    /// Logarithm map. Fails when the rotation angle is within
    /// [`LOG_ANGLE_MARGIN`] of pi.
    pub fn log(&self) -> Result<Twist, Se3Error> {
        let mut q = *self.rotation.quaternion();
        if q.w < 0.0 {
            q = -q;
        }
        let vec_norm = q.imag().norm();
        let theta = 2.0 * vec_norm.atan2(q.w);
        if theta > PI - LOG_ANGLE_MARGIN {
            return Err(Se3Error::GimbalBoundary { angle: theta });
        }
        let phi = if vec_norm < 1e-12 { q.imag() * (2.0 / q.w) } else { q.imag() * (theta / vec_norm) };
        let k = skew(&phi);
        let coeff = if theta < 1e-5 {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / (theta * theta)
        };
        let inv_jac = Matrix3::identity() - k * 0.5 + k * k * coeff;
        Ok(Twist::new(inv_jac * self.translation, phi))
    }

    /// `self * exp(delta)`, the retraction used by the optimizer.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        self.compose(&Pose::exp(&Twist::from_vector(delta)))
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Euclidean distance between the two translations.
pub fn translation_error_m(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Angle of the relative rotation between `a` and `b`, in degrees.
pub fn rotation_error_deg(a: &Pose, b: &Pose) -> f64 {
    a.between(b).rotation_angle().to_degrees()
}

impl fmt::Display for Pose {
    /// `x y z qx qy qz qw`, nine significant digits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        let q = self.rotation.quaternion();
        write!(f, "{} {} {} {} {} {} {}", fmt_sig(t.x), fmt_sig(t.y), fmt_sig(t.z), fmt_sig(q.i), fmt_sig(q.j), fmt_sig(q.k), fmt_sig(q.w))
    }
}

impl Pose {
    /// Parses exactly seven fields `x y z qx qy qz qw`.
    pub fn from_fields(fields: &[&str]) -> Result<Pose, Se3Error> {
        if fields.len() != 7 {
            return Err(Se3Error::Parse(format!("expected 7 fields, found {}", fields.len())));
        }
        let mut v = [0.0f64; 7];
        for (slot, field) in v.iter_mut().zip(fields) {
            *slot = field.parse::<f64>().map_err(|e| Se3Error::Parse(format!("{field:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(Se3Error::Parse(format!("non-finite value {field:?}")));
            }
        }
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        if q.norm() < 1e-12 {
            return Err(Se3Error::Parse("zero quaternion".into()));
        }
        Ok(Pose::new(Vector3::new(v[0], v[1], v[2]), q))
    }
}

impl FromStr for Pose {
    type Err = Se3Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        Pose::from_fields(&fields)
    }
}
