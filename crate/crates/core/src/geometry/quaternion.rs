use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{PointCloud, Vec3};
use crate::error::{invalid_param, Result};

/// Rotation quaternion, Hamilton convention, scalar first.
///
/// Rotations are active: `rotate(v)` computes `q v q*`. Constructors that
/// produce a rotation renormalize, so a value obtained from them is unit
/// norm to within rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n.is_finite() && n > 0.0 && angle.is_finite()) {
            return Err(invalid_param("axis must be finite and nonzero"));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Ok(Self::new(c, s * a.x, s * a.y, s * a.z))
    }

    /// Rotation taking the world frame into the frame whose rows are `m`.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        // Shepperd's method: pick the largest diagonal combination for stability.
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized().unwrap_or(Self::IDENTITY)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !self.is_finite() || !(n > 0.0) || !n.is_finite() {
            return Err(invalid_param(format!("quaternion {:?} cannot be normalized", self)));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Representative of `±q` with non-negative scalar part.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Hamilton product `self ⊗ rhs` (apply `rhs` first).
    pub fn mul(self, r: Self) -> Self {
        let (a, b) = (self, r);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_matrix(self) -> Matrix3<f64> {
        let n = self.norm();
        let (w, x, y, z) = (self.w / n, self.x / n, self.y / n, self.z / n);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        self.to_matrix() * v
    }

    /// Angle of the relative rotation between two orientations, `2·acos(|⟨q₁,q₂⟩|)`.
    pub fn angular_distance(self, other: Self) -> f64 {
        let a = self.normalized().unwrap_or(Self::IDENTITY);
        let b = other.normalized().unwrap_or(Self::IDENTITY);
        2.0 * a.dot(b).abs().min(1.0).acos()
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(self) -> f64 {
        self.angular_distance(Self::IDENTITY)
    }

    /// Pulls a gradient w.r.t. the rotation matrix back onto the raw
    /// (unnormalized) quaternion components.
    ///
    /// `to_matrix` normalizes internally, so the result is orthogonal to `self`:
    /// it is the unit-sphere tangent projection of the gradient w.r.t. the
    /// normalized quaternion, divided by the norm.
    pub fn pullback_matrix_grad(self, g: &Matrix3<f64>) -> [f64; 4] {
        let n = self.norm();
        let (w, x, y, z) = (self.w / n, self.x / n, self.y / n, self.z / n);
        let gw = 2.0
            * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
                + x * g[(2, 1)]);
        let gx = 2.0
            * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)]
                - w * g[(1, 2)]
                + z * g[(2, 0)]
                + w * g[(2, 1)]
                - 2.0 * x * g[(2, 2)]);
        let gy = 2.0
            * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
                + z * g[(1, 2)]
                - w * g[(2, 0)]
                + z * g[(2, 1)]
                - 2.0 * y * g[(2, 2)]);
        let gz = 2.0
            * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
                - 2.0 * z * g[(1, 1)]
                + y * g[(1, 2)]
                + x * g[(2, 0)]
                + y * g[(2, 1)]);
        let radial = w * gw + x * gx + y * gy + z * gz;
        [
            (gw - radial * w) / n,
            (gx - radial * x) / n,
            (gy - radial * y) / n,
            (gz - radial * z) / n,
        ]
    }
}

fn check_unit(q: Quaternion, what: &str) -> Result<Quaternion> {
    if !q.is_finite() {
        return Err(invalid_param(format!("{what}: non-finite quaternion")));
    }
    q.normalized()
}

/// Rotates every point about the origin.
pub fn quat_rotate(q: Quaternion, cloud: &PointCloud) -> Result<PointCloud> {
    let m = check_unit(q, "quat_rotate")?.to_matrix();
    Ok(cloud.map_points(|p| m * p))
}

/// Composition that applies `q_acc` first and then `q_new`, renormalized.
pub fn quat_compose(q_new: Quaternion, q_acc: Quaternion) -> Result<Quaternion> {
    let a = check_unit(q_new, "quat_compose")?;
    let b = check_unit(q_acc, "quat_compose")?;
    a.mul(b).normalized()
}
