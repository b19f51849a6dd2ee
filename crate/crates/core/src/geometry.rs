//! Quaternion and rigid-transform arithmetic.
//!
//! Everything is `f64`. Quaternions are stored scalar-first `(w, x, y, z)`
//! and use the Hamilton product, so `to_matrix(a * b) = to_matrix(a) * to_matrix(b)`.

use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Maximum deviation of `|q|` from 1 accepted by [`Quaternion::to_matrix`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Above this dot product [`slerp`] falls back to normalized linear interpolation.
const SLERP_PARALLEL_DOT: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quaternion {
    fn from(v: [f64; 4]) -> Self {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        [q.w, q.x, q.y, q.z]
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateQuaternion);
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Ok(Quaternion::new(c, a.x * s, a.y * s, a.z * s))
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn norm_squared(&self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn scale(&self, s: f64) -> Quaternion {
        Quaternion::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn conjugate(&self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn normalize(&self) -> Result<Quaternion> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateQuaternion);
        }
        Ok(self.scale(1.0 / n))
    }

    /// Representative with `w >= 0` (ties on `w == 0` resolved on the first
    /// nonzero vector component). `q` and `-q` map to the same result.
    pub fn canonical(&self) -> Quaternion {
        let key = [self.w, self.x, self.y, self.z]
            .into_iter()
            .find(|c| *c != 0.0)
            .unwrap_or(0.0);
        if key < 0.0 {
            -*self
        } else {
            *self
        }
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vector().norm().atan2(self.w.abs())
    }

    /// Geodesic angle between the rotations represented by `self` and `other`.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        (self.conjugate() * *other).angle()
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(&self) -> Result<Mat3> {
        let n = self.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
            return Err(Error::NonUnitQuaternion { norm: n });
        }
        Ok(self.matrix_unchecked())
    }

    /// Rotation matrix without the unit-norm check.
    pub fn matrix_unchecked(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Mat3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Pulls a gradient with respect to the rotation matrix back onto the
    /// (unit) quaternion components, using the same closed form as
    /// [`Quaternion::matrix_unchecked`].
    pub fn matrix_vjp(&self, g: &Mat3) -> [f64; 4] {
        let Quaternion { w, x, y, z } = *self;
        let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
        let gx = 2.0
            * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
                + z * g[(2, 0)]
                + w * g[(2, 1)]
                - 2.0 * x * g[(2, 2)]);
        let gy = 2.0
            * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
                - w * g[(2, 0)]
                + z * g[(2, 1)]
                - 2.0 * y * g[(2, 2)]);
        let gz = 2.0
            * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
                - 2.0 * z * g[(1, 1)]
                + y * g[(1, 2)]
                + x * g[(2, 0)]
                + y * g[(2, 1)]);
        [gw, gx, gy, gz]
    }

    /// Quaternion of a rotation matrix (Shepperd's method), returned in
    /// canonical sign.
    pub fn from_matrix(m: &Mat3) -> Quaternion {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let n = q.norm();
        q.scale(1.0 / n).canonical()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.matrix_unchecked() * v
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, r: Quaternion) -> Quaternion {
        let l = self;
        Quaternion::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
    }
}

/// Spherical linear interpolation along the shorter arc from `q0` to `q1`.
///
/// `t` is unrestricted: values outside `[0, 1]` extrapolate along the same
/// great circle. `t == 0` returns `q0` and `t == 1` returns `q1` (sign
/// flipped onto `q0`'s hemisphere) bit-for-bit.
pub fn slerp(q0: &Quaternion, q1: &Quaternion, t: f64) -> Quaternion {
    let mut dot = q0.dot(q1);
    let q1 = if dot < 0.0 {
        dot = -dot;
        -*q1
    } else {
        *q1
    };
    if t == 0.0 {
        return *q0;
    }
    if t == 1.0 {
        return q1;
    }
    if dot > SLERP_PARALLEL_DOT {
        let q = Quaternion::new(
            q0.w + t * (q1.w - q0.w),
            q0.x + t * (q1.x - q0.x),
            q0.y + t * (q1.y - q0.y),
            q0.z + t * (q1.z - q0.z),
        );
        return q.normalize().unwrap_or(*q0);
    }
    let theta = dot.min(1.0).acos();
    let s = theta.sin();
    let a = ((1.0 - t) * theta).sin() / s;
    let b = (t * theta).sin() / s;
    Quaternion::new(
        a * q0.w + b * q1.w,
        a * q0.x + b * q1.x,
        a * q0.y + b * q1.y,
        a * q0.z + b * q1.z,
    )
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Se3 {
    pub rotation: Quaternion,
    #[serde(with = "vec3_array")]
    pub translation: Vec3,
}

impl Default for Se3 {
    fn default() -> Self {
        Se3::IDENTITY
    }
}

impl Se3 {
    pub const IDENTITY: Se3 = Se3 {
        rotation: Quaternion::IDENTITY,
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    /// Builds a transform, normalizing the rotation.
    pub fn new(rotation: Quaternion, translation: Vec3) -> Result<Se3> {
        Ok(Se3 {
            rotation: rotation.normalize()?,
            translation,
        })
    }

    pub fn from_translation(t: Vec3) -> Se3 {
        Se3 {
            rotation: Quaternion::IDENTITY,
            translation: t,
        }
    }

    pub fn from_rotation(q: Quaternion) -> Result<Se3> {
        Se3::new(q, Vec3::zeros())
    }

    pub fn matrix(&self) -> Mat3 {
        self.rotation.matrix_unchecked()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.matrix() * p + self.translation
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, b: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * b.rotation,
            translation: self.matrix() * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        Se3 {
            rotation: self.rotation.conjugate(),
            translation: -(self.matrix().transpose() * self.translation),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Serde adapter writing a `Vec3` as a plain `[x, y, z]` array.
pub(crate) mod vec3_array {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}

/// Same as [`vec3_array`] for sequences of vectors.
pub(crate) mod vec3_seq {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec3], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|p| [p.x, p.y, p.z]))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec3>, D::Error> {
        let a = Vec::<[f64; 3]>::deserialize(d)?;
        Ok(a.into_iter().map(Vec3::from).collect())
    }
}
