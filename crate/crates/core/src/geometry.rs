//! Gaze-label conversions, angular error, and the gaze-conditioned 3D
//! rotation used to rotate eye feature triplets.
//!
//! Convention: the canonical gaze `(pitch, yaw) = (0, 0)` points along `-z`
//! (towards the camera), with
//! `v(g) = (-cos p * sin y, -sin p, -cos p * cos y)`.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Pitch-yaw gaze label in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeAngles {
    pub pitch: f64,
    pub yaw: f64,
}

impl GazeAngles {
    /// Builds a gaze label, wrapping yaw to `(-pi, pi]`.
    pub fn new(pitch: f64, yaw: f64) -> Result<Self> {
        if !pitch.is_finite() || !yaw.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite gaze angles ({pitch}, {yaw})"
            )));
        }
        Ok(Self {
            pitch,
            yaw: wrap_angle(yaw),
        })
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        w = PI;
    }
    w
}

/// A 3-vector of unit Euclidean norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector3(Vector3<f64>);

impl UnitVector3 {
    /// Normalizes `v`; errors on zero or non-finite input.
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite vector".into()));
        }
        let n = v.norm();
        if n == 0.0 {
            return Err(Error::InvalidArgument("zero-length vector".into()));
        }
        Ok(Self(v / n))
    }

    pub fn from_components(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::new(Vector3::new(x, y, z))
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }
    pub fn y(&self) -> f64 {
        self.0.y
    }
    pub fn z(&self) -> f64 {
        self.0.z
    }
}

/// A proper 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    /// Validates `R^T R = I` and `det R = 1` within `tol`.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let tol = 1e-9;
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err > tol {
            return Err(Error::InvalidArgument(format!(
                "matrix is not orthogonal (max deviation {err:.3e})"
            )));
        }
        if (m.determinant() - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "determinant {} != 1",
                m.determinant()
            )));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        Self(self.0 * other.0)
    }
}

/// Maps a gaze label to its unit direction vector.
pub fn pitchyaw_to_vector(g: GazeAngles) -> UnitVector3 {
    let (p, y) = (g.pitch, g.yaw);
    UnitVector3(Vector3::new(
        -p.cos() * y.sin(),
        -p.sin(),
        -p.cos() * y.cos(),
    ))
}

/// Inverse of [`pitchyaw_to_vector`] on unit vectors.
pub fn vector_to_pitchyaw(v: &UnitVector3) -> GazeAngles {
    let u = v.as_vector();
    GazeAngles {
        pitch: (-u.y).clamp(-1.0, 1.0).asin(),
        yaw: (-u.x).atan2(-u.z),
    }
}

/// Rotation carrying the canonical gaze `(0,0)` to the gaze `g`:
/// `R(g) = Rot_y(yaw) * Rot_x(-pitch)`, so `R(g) * (0,0,-1) = v(g)`.
pub fn gaze_rotation_matrix(g: GazeAngles) -> RotationMatrix {
    let (sp, cp) = g.pitch.sin_cos();
    let (sy, cy) = g.yaw.sin_cos();
    RotationMatrix(Matrix3::new(
        cy,
        -sy * sp,
        sy * cp,
        0.0,
        cp,
        sp,
        -sy,
        -cy * sp,
        cy * cp,
    ))
}

/// Angle between two vectors: `arccos(v . v_hat / (|v| |v_hat|))`, with the
/// cosine clamped to `[-1, 1]` before `arccos`.
pub fn angular_error(v: &UnitVector3, v_hat: &UnitVector3) -> f64 {
    let c = v.as_vector().dot(v_hat.as_vector()) / (v.as_vector().norm() * v_hat.as_vector().norm());
    c.clamp(-1.0, 1.0).acos()
}

/// Angular error between two vectors given as raw components.
pub fn angular_error_raw(v: &Vector3<f64>, v_hat: &Vector3<f64>) -> Result<f64> {
    let (a, b) = (v.norm(), v_hat.norm());
    if a == 0.0 || b == 0.0 {
        return Err(Error::InvalidArgument("zero-length vector".into()));
    }
    Ok((v.dot(v_hat) / (a * b)).clamp(-1.0, 1.0).acos())
}
