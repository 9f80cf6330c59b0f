//! Rotation, bearing and pinhole primitives.
//!
//! Conventions used everywhere in the crate:
//!
//! * Quaternions are Hamilton, scalar-first. `q_b_i` maps body-frame vectors
//!   into the inertial frame, `q_b_c` and `q_b_r` map body-frame vectors into
//!   the camera and radar frames.
//! * Bearings are unit vectors in the sensor frame. For radar, azimuth is
//!   measured about +z from +x and elevation from the x-y plane.
//! * The camera frame is x right, y down, z along the optical axis.

use nalgebra::{Matrix3, Matrix3x2, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

const SMALL_ANGLE: f64 = 1e-8;

/// Unit direction vector from a sensor origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BearingVector(Vec3);

impl BearingVector {
    /// Normalizes `v`. Returns `None` for a (near) zero vector.
    pub fn new(v: Vec3) -> Option<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-12 {
            return None;
        }
        Some(Self(v / n))
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    pub fn into_inner(self) -> Vec3 {
        self.0
    }

    /// Azimuth and elevation of the bearing, inverse of [`bearing_from_angles`].
    pub fn angles(&self) -> (f64, f64) {
        let v = self.0;
        (v.y.atan2(v.x), v.z.clamp(-1.0, 1.0).asin())
    }
}

pub fn bearing_from_angles(theta: f64, phi: f64) -> BearingVector {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    BearingVector(Vec3::new(ct * cp, st * cp, sp))
}

pub fn target_position(d: f64, mu: &BearingVector) -> Vec3 {
    mu.0 * d
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn quat_rotate(q: &Quat, x: &Vec3) -> Vec3 {
    q * x
}

pub fn quat_product(q1: &Quat, q2: &Quat) -> Quat {
    q1 * q2
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn so3_exp(phi: &Vec3) -> Quat {
    let angle = phi.norm();
    let half = 0.5 * angle;
    let (w, k) = if angle < SMALL_ANGLE {
        // second-order Taylor expansion of cos(a/2), sin(a/2)/a
        (1.0 - angle * angle / 8.0, 0.5 - angle * angle / 48.0)
    } else {
        (half.cos(), half.sin() / angle)
    };
    let q = nalgebra::Quaternion::new(w, k * phi.x, k * phi.y, k * phi.z);
    UnitQuaternion::new_normalize(q)
}

/// Logarithm map, inverse of [`so3_exp`] on the ball of radius π.
pub fn so3_log(q: &Quat) -> Vec3 {
    let q = canonical(q);
    let w = q.w;
    let v = Vec3::new(q.i, q.j, q.k);
    let s = v.norm();
    if s < SMALL_ANGLE {
        // 2 atan2(s, w)/s ≈ 2/w (1 - s²/(3w²))
        return v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w));
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(J_r(φ) δ)`.
pub fn so3_right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Mat3::identity() - 0.5 * k + (k * k) / 6.0;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Mat3::identity() - a * k + b * (k * k)
}

/// Returns the representative of `q` with non-negative scalar part.
pub fn canonical(q: &Quat) -> Quat {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    }
}

/// Orthonormal basis of the tangent plane at `mu`.
///
/// The columns are the images of `e_x`, `e_y` under the minimal rotation taking
/// `e_z` onto `mu`, so `(n1, n2, mu)` is right-handed. The construction is
/// smooth everywhere except at the seam `mu = -e_z`; within 1e-9 of the seam a
/// fixed basis `(e_x, -e_y)` is returned.
pub fn tangent_basis(mu: &BearingVector) -> Matrix3x2<f64> {
    let (a, b, c) = (mu.0.x, mu.0.y, mu.0.z);
    let denom = 1.0 + c;
    if denom < 1e-9 {
        return Matrix3x2::new(1.0, 0.0, 0.0, -1.0, 0.0, 0.0);
    }
    let s = 1.0 / denom;
    Matrix3x2::new(
        1.0 - a * a * s,
        -a * b * s,
        -a * b * s,
        1.0 - b * b * s,
        -a,
        -b,
    )
}

/// Directional derivative of [`tangent_basis`] along `dir` (ambient coordinates).
pub fn tangent_basis_derivative(mu: &BearingVector, dir: &Vec3) -> Matrix3x2<f64> {
    let (a, b, c) = (mu.0.x, mu.0.y, mu.0.z);
    let denom = 1.0 + c;
    if denom < 1e-9 {
        return Matrix3x2::zeros();
    }
    let s = 1.0 / denom;
    let s2 = s * s;
    let (da, db, dc) = (dir.x, dir.y, dir.z);
    let n1 = Vec3::new(
        -2.0 * a * s * da + a * a * s2 * dc,
        -b * s * da - a * s * db + a * b * s2 * dc,
        -da,
    );
    let n2 = Vec3::new(
        -b * s * da - a * s * db + a * b * s2 * dc,
        -2.0 * b * s * db + b * b * s2 * dc,
        -db,
    );
    Matrix3x2::from_columns(&[n1, n2])
}

/// Moves `mu` along the tangent plane: the first-order displacement equals
/// `N(mu) delta`.
pub fn bearing_boxplus(mu: &BearingVector, delta: &Vector2<f64>) -> BearingVector {
    let n = tangent_basis(mu);
    let axis = mu.0.cross(&(n * delta));
    BearingVector(so3_exp(&axis) * mu.0)
}

/// Inverse of [`bearing_boxplus`]: tangent coordinates at `base` of `mu`.
pub fn bearing_boxminus(mu: &BearingVector, base: &BearingVector) -> Vector2<f64> {
    let cross = base.0.cross(&mu.0);
    let s = cross.norm();
    let c = base.0.dot(&mu.0);
    let phi = if s < 1e-15 {
        Vec3::zeros()
    } else {
        cross * (s.atan2(c) / s)
    };
    tangent_basis(base).transpose() * phi.cross(&base.0)
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Bearing of a pixel in the camera frame.
    pub fn unproject(&self, u: f64, v: f64) -> BearingVector {
        let ray = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        BearingVector(ray.normalize())
    }
}

pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

/// Projects a camera-frame point. `None` means the point is behind the camera.
pub fn pinhole_project(p_c: &Vec3, intr: &CameraIntrinsics) -> Option<Vector2<f64>> {
    if p_c.z <= BEHIND_CAMERA_EPS {
        return None;
    }
    Some(Vector2::new(
        intr.fx * p_c.x / p_c.z + intr.cx,
        intr.fy * p_c.y / p_c.z + intr.cy,
    ))
}
