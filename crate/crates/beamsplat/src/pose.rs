//! Rigid transforms (proper rotation + translation).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How far a rotation matrix may drift from orthonormal / det +1 before
/// it is rejected as non-rigid.
pub const RIGIDITY_TOL: f64 = 1e-9;

/// A rigid transform. Constructors enforce that the rotation part is
/// orthonormal with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if ortho_err > RIGIDITY_TOL || (det - 1.0).abs() > RIGIDITY_TOL {
            return Err(Error::domain(format!(
                "non-rigid pose: orthonormality error {ortho_err:.3e}, det {det:.12}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw_translation(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Composition: the result maps p to self(other(p)).
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major [r00..r22, tx, ty, tz] used by `poses.csv`.
    pub fn to_row(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_row(row: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(
            row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], row[8],
        );
        Self::new(rotation, Vector3::new(row[9], row[10], row[11]))
    }
}
