//! Quaternion and rigid-pose algebra.
//!
//! Quaternions are Hamilton, scalar-first. A [`Pose`] maps a point `p` to
//! `q [0,p] q⁻¹ + t`, i.e. rotation first, then translation, and always holds
//! a unit quaternion with a non-negative scalar part.

use std::ops::Mul;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
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

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let n = norm3(axis);
        if n == 0.0 {
            return Err(Error::Invalid("zero rotation axis".into()));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Ok(Quaternion::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n))
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit quaternion in the same direction.
    ///
    /// Inputs already within a few ulps of unit norm are returned untouched,
    /// which makes normalization idempotent bit-for-bit.
    pub fn normalize(self) -> Result<Self> {
        let n2 = self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z;
        if !(n2 > 0.0) || !n2.is_finite() {
            return Err(Error::ZeroQuaternion);
        }
        if (n2 - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(self);
        }
        let n = n2.sqrt();
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Representative of `±q` with `w ≥ 0` (first non-zero vector component
    /// positive when `w = 0`).
    pub fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            [self.x, self.y, self.z]
                .into_iter()
                .find(|c| *c != 0.0)
                .is_some_and(|c| c < 0.0)
        };
        if flip {
            -self
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn inverse(self) -> Result<Self> {
        let n2 = self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z;
        if n2 == 0.0 {
            return Err(Error::ZeroQuaternion);
        }
        let c = self.conjugate();
        Ok(Quaternion::new(c.w / n2, c.x / n2, c.y / n2, c.z / n2))
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Rotation angle in radians between the rotations of two unit
    /// quaternions, in `[0, π]`.
    pub fn angle_to(self, o: Quaternion) -> f64 {
        2.0 * self.dot(o).abs().min(1.0).acos()
    }

    /// Rotation matrix of a unit quaternion, row-major.
    pub fn to_rotation_matrix(self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// `q [0,p] q⁻¹` via the quaternion sandwich product.
    pub fn rotate(self, p: Vec3) -> Result<Vec3> {
        let q = self.normalize()?;
        let v = q * Quaternion::new(0.0, p[0], p[1], p[2]) * q.conjugate();
        Ok([v.x, v.y, v.z])
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product.
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

pub fn quat_mul(a: Quaternion, b: Quaternion) -> Quaternion {
    a * b
}

/// `q [0,p] q⁻¹ + t`; `q` is normalized before use.
pub fn rotate_point(q: Quaternion, t: Vec3, p: Vec3) -> Result<Vec3> {
    let r = q.rotate(p)?;
    Ok([r[0] + t[0], r[1] + t[1], r[2] + t[2]])
}

/// Intrinsic Z-Y-X (yaw, pitch, roll) composition.
pub fn euler_to_quat(yaw: f64, pitch: f64, roll: f64) -> Quaternion {
    let (sy, cy) = (yaw / 2.0).sin_cos();
    let (sp, cp) = (pitch / 2.0).sin_cos();
    let (sr, cr) = (roll / 2.0).sin_cos();
    Quaternion::new(
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    )
}

/// Rigid transform: unit quaternion plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    q: Quaternion,
    pub t: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        q: Quaternion::IDENTITY,
        t: [0.0; 3],
    };

    /// Normalizes and sign-canonicalizes `q`.
    pub fn new(q: Quaternion, t: Vec3) -> Result<Self> {
        Ok(Pose {
            q: q.normalize()?.canonical(),
            t,
        })
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose {
            q: Quaternion::IDENTITY,
            t,
        }
    }

    pub fn q(&self) -> Quaternion {
        self.q
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let r = mat3_vec(&self.q.to_rotation_matrix(), p);
        [r[0] + self.t[0], r[1] + self.t[1], r[2] + self.t[2]]
    }

    /// `self ∘ coarse`: apply `coarse` first, then `self`.
    ///
    /// `q = Δq·q_c`, `t = Δq t_c Δq⁻¹ + Δt`.
    pub fn compose(&self, coarse: &Pose) -> Pose {
        let q = self.q * coarse.q;
        let rt = self.q.rotate(coarse.t).expect("unit quaternion");
        Pose::new(q, add3(rt, self.t)).expect("product of unit quaternions")
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.conjugate();
        let t = qi.rotate(self.t).expect("unit quaternion");
        Pose::new(qi, [-t[0], -t[1], -t[2]]).expect("unit quaternion")
    }

    pub fn to_matrix(&self) -> Transform4 {
        let r = self.q.to_rotation_matrix();
        let mut m = Transform4::IDENTITY.m;
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = self.t[i];
        }
        Transform4 { m }
    }

    /// Inverse of [`Pose::to_matrix`]; rejects rotation blocks whose
    /// `RᵀR` deviates from identity by more than `1e-6`.
    pub fn from_matrix(t: &Transform4) -> Result<Pose> {
        Pose::from_matrix_tol(t, 1e-6)
    }

    pub fn from_matrix_tol(t: &Transform4, tol: f64) -> Result<Pose> {
        let err = t.orthonormality_error();
        if !(err <= tol) {
            return Err(Error::NotOrthonormal(err));
        }
        let m = &t.m;
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        Pose::new(q, [m[0][3], m[1][3], m[2][3]])
    }

    /// Rotation angle (radians) of `self⁻¹ ∘ other`.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        self.q.angle_to(other.q)
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        norm3(sub3(self.t, other.t))
    }
}

pub fn pose_compose(delta: &Pose, coarse: &Pose) -> Pose {
    delta.compose(coarse)
}

pub fn pose_inverse(p: &Pose) -> Pose {
    p.inverse()
}

pub fn pose_to_matrix(p: &Pose) -> Transform4 {
    p.to_matrix()
}

pub fn matrix_to_pose(t: &Transform4) -> Result<Pose> {
    Pose::from_matrix(t)
}

/// Homogeneous 4×4 rigid transform, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform4 {
    pub m: [[f64; 4]; 4],
}

impl Default for Transform4 {
    fn default() -> Self {
        Transform4::IDENTITY
    }
}

impl Transform4 {
    pub const IDENTITY: Transform4 = Transform4 {
        m: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    };

    /// From twelve row-major values of the top 3×4 block.
    pub fn from_3x4(v: &[f64; 12]) -> Self {
        let mut m = Transform4::IDENTITY.m;
        for r in 0..3 {
            m[r].copy_from_slice(&v[r * 4..r * 4 + 4]);
        }
        Transform4 { m }
    }

    pub fn to_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            out[r * 4..r * 4 + 4].copy_from_slice(&self.m[r]);
        }
        out
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            r[i].copy_from_slice(&self.m[i][..3]);
        }
        r
    }

    pub fn translation(&self) -> Vec3 {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Inverse assuming an orthonormal rotation block.
    pub fn inverse_rigid(&self) -> Transform4 {
        let r = self.rotation();
        let t = self.translation();
        let mut m = Transform4::IDENTITY.m;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[j][i];
            }
            m[i][3] = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        }
        Transform4 { m }
    }

    /// Largest entry of `|RᵀR − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        if worst.is_nan() {
            f64::INFINITY
        } else {
            worst
        }
    }

    pub fn max_abs_diff(&self, other: &Transform4) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                worst = worst.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        worst
    }
}

impl Mul for Transform4 {
    type Output = Transform4;

    fn mul(self, b: Transform4) -> Transform4 {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = (0..4).map(|k| self.m[i][k] * b.m[k][j]).sum();
            }
        }
        Transform4 { m }
    }
}

pub(crate) fn mat3_vec(r: &[[f64; 3]; 3], p: Vec3) -> Vec3 {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}
