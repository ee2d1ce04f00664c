//! Rigid model-to-camera transforms.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Tolerance on `‖RᵀR − I‖` and `|det R − 1|` for a matrix to count as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("rotation is not orthonormal (‖RᵀR − I‖ = {orthogonality:e}, |det − 1| = {det:e})")]
    NotARotation { orthogonality: f64, det: f64 },
    #[error("pose contains non-finite values")]
    NonFinite,
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

/// Rigid transform `x_cam = R · x_model + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, PoseError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        let orthogonality = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let det = (rotation.determinant() - 1.0).abs();
        if orthogonality > ROTATION_TOLERANCE || det > ROTATION_TOLERANCE {
            return Err(PoseError::NotARotation { orthogonality, det });
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, normalizing it first.
    pub fn from_quaternion(wxyz: [f64; 4], translation: Vector3<f64>) -> Result<Self, PoseError> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        if !q.coords.iter().all(|v| v.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        if q.norm() == 0.0 {
            return Err(PoseError::ZeroQuaternion);
        }
        let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
        Self::new(*rot.matrix(), translation)
    }

    /// Quaternion `(w, x, y, z)` with `w ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Camera center expressed in the model frame.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pose of a camera at `eye` whose optical axis points at `target`.
    ///
    /// The image `y` axis follows the projection of `-up`; a fallback up vector is used
    /// when the viewing direction is parallel to `up`.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Option<Self> {
        let z = (target - eye).try_normalize(1e-12)?;
        let mut x = z.cross(&-up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::y());
            if x.norm() < 1e-9 {
                x = z.cross(&Vector3::x());
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Some(Self { rotation, translation })
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Projects a near-rotation onto SO(3) before building the pose.
    pub(crate) fn from_parts_orthonormalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            translation,
        }
    }
}

/// Closest rotation in the Frobenius sense, via SVD.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}
