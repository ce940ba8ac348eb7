//! Rigid-body pose, quaternion and pinhole camera primitives.
//!
//! Quaternions are stored `w, x, y, z`. A [`Pose`] keeps its rotation as a
//! possibly unnormalized quaternion so that the optimizer can take gradient
//! steps on the raw parameters; every rotation matrix is built from the
//! normalized quaternion.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Smallest quaternion norm that can still be normalized.
pub const MIN_QUAT_NORM: f64 = 1e-12;

/// Minimum camera-space depth accepted by [`CameraIntrinsics::project`].
pub const MIN_PROJECT_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n < MIN_QUAT_NORM {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn as_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        self.to_vector().norm()
    }

    pub fn dot(self, other: Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn is_finite(self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn normalize(self) -> Result<Self, GeometryError> {
        let n = self.norm();
        if !(n > MIN_QUAT_NORM) {
            return Err(GeometryError::DegenerateQuaternion { norm: n });
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, rhs: Quaternion) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Rotation matrix of the normalized quaternion. Degenerate input maps to
    /// the identity.
    pub fn to_rotation_matrix(self) -> Matrix3<f64> {
        match self.normalize() {
            Ok(q) => unit_rotation_matrix(q),
            Err(_) => Matrix3::identity(),
        }
    }

    /// Geodesic angle in radians between the rotations of two quaternions.
    pub fn angle_to(self, other: Quaternion) -> f64 {
        let (Ok(a), Ok(b)) = (self.normalize(), other.normalize()) else {
            return f64::NAN;
        };
        let d = a.dot(b).abs().min(1.0);
        2.0 * d.acos()
    }
}

/// Normalizes `q`; fails on a near-zero norm.
pub fn quat_normalize(q: Quaternion) -> Result<Quaternion, GeometryError> {
    q.normalize()
}

fn unit_rotation_matrix(q: Quaternion) -> Matrix3<f64> {
    let Quaternion { w, x, y, z } = q;
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

/// Partial derivatives of the unit-quaternion rotation matrix with respect to
/// `w, x, y, z` (treating the quaternion as already normalized).
fn unit_rotation_partials(q: Quaternion) -> [Matrix3<f64>; 4] {
    let Quaternion { w, x, y, z } = q;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    [dw, dx, dy, dz]
}

/// Camera-from-object rigid transform, `p_cam = R(q) * p_obj + t`.
///
/// Serialized as `{"quaternion": [w, x, y, z], "translation": [x, y, z]}`
/// with the translation in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRecord", into = "PoseRecord")]
pub struct Pose {
    pub rotation: Quaternion,
    /// Meters, camera frame.
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    quaternion: [f64; 4],
    translation: [f64; 3],
}

impl From<PoseRecord> for Pose {
    fn from(r: PoseRecord) -> Self {
        let [w, x, y, z] = r.quaternion;
        Pose::new(Quaternion::new(w, x, y, z), Vector3::from(r.translation))
    }
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> Self {
        PoseRecord { quaternion: p.rotation.as_array(), translation: p.translation.into() }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Quaternion::IDENTITY, translation: Vector3::zeros() }
    }

    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Quaternion::IDENTITY, translation: t }
    }

    /// Copy with the rotation normalized.
    pub fn normalized(&self) -> Result<Self, GeometryError> {
        Ok(Self { rotation: self.rotation.normalize()?, translation: self.translation })
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// Transforms many points with one rotation-matrix conversion.
    pub fn apply(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let r = self.rotation_matrix();
        points.iter().map(|p| r * p + self.translation).collect()
    }

    /// Transformed point and its Jacobian with respect to the raw quaternion
    /// (3×4, columns `w, x, y, z`). The Jacobian with respect to the
    /// translation is the identity.
    pub fn apply_with_jacobian(&self, p: &Vector3<f64>) -> (Vector3<f64>, Matrix3x4<f64>) {
        let r = self.rotation_matrix();
        let mut jac = Matrix3x4::zeros();
        if let Ok(qn) = self.rotation.normalize() {
            // dR/dq_raw = sum_j dR/dqn_j * dqn_j/dq_raw
            let partials = unit_rotation_partials(qn);
            let dn = normalization_jacobian(self.rotation);
            let cols: Vec<Vector3<f64>> = partials.iter().map(|m| m * p).collect();
            for raw in 0..4 {
                let mut c = Vector3::zeros();
                for (j, col) in cols.iter().enumerate() {
                    c += col * dn[(j, raw)];
                }
                jac.set_column(raw, &c);
            }
        }
        (r * p + self.translation, jac)
    }

    /// Chains a gradient with respect to the rotation matrix entries back to
    /// the raw quaternion.
    pub fn rotation_matrix_grad_to_quaternion(&self, d_rot: &Matrix3<f64>) -> Vector4<f64> {
        let Ok(qn) = self.rotation.normalize() else {
            return Vector4::zeros();
        };
        let partials = unit_rotation_partials(qn);
        let d_unit = Vector4::from_iterator(partials.iter().map(|m| m.component_mul(d_rot).sum()));
        normalization_jacobian(self.rotation).transpose() * d_unit
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let r = self.rotation_matrix();
        Pose {
            rotation: self.rotation.mul(other.rotation),
            translation: r * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let q_inv = match self.rotation.normalize() {
            Ok(q) => q.conjugate(),
            Err(_) => Quaternion::IDENTITY,
        };
        let r_inv = self.rotation_matrix().transpose();
        Pose { rotation: q_inv, translation: -(r_inv * self.translation) }
    }
}

pub fn pose_apply(pose: &Pose, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    pose.apply(points)
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn pose_inverse(a: &Pose) -> Pose {
    a.inverse()
}

/// d(q / |q|) / dq, rows indexed by normalized component.
fn normalization_jacobian(q: Quaternion) -> nalgebra::Matrix4<f64> {
    let v = q.to_vector();
    let n = v.norm();
    let u = v / n;
    (nalgebra::Matrix4::identity() - u * u.transpose()) / n
}

/// Pinhole intrinsics. Pixel `(i, j)` covers `[i, i+1) × [j, j+1)`, so the
/// center of the top-left pixel sits at `(0.5, 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Intrinsics for the image resized to `width × height`.
    pub fn scaled_to(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// Pinhole projection of one camera-frame point.
    pub fn project_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(p.z > MIN_PROJECT_DEPTH) {
            return Err(GeometryError::BehindCamera { z: p.z });
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Projection without the depth check; callers guarantee `z > 0`.
    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let iz = 1.0 / p.z;
        Vector2::new(self.fx * p.x * iz + self.cx, self.fy * p.y * iz + self.cy)
    }

    /// 2×3 Jacobian of the projection, rows `u, v`.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        )
    }

    pub fn project(&self, points: &[Vector3<f64>]) -> Result<Vec<Vector2<f64>>, GeometryError> {
        points.iter().map(|p| self.project_point(p)).collect()
    }
}

pub fn project(k: &CameraIntrinsics, points: &[Vector3<f64>]) -> Result<Vec<Vector2<f64>>, GeometryError> {
    k.project(points)
}
